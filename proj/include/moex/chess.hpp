#pragma once

#include <array>
#include <bitset>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace moex::chess {

// Piece kinds in BSP order: white P N B R Q K, then black P N B R Q K.
enum PieceKind : std::int8_t { kNone = -1, kWP, kWN, kWB, kWR, kWQ, kWK, kBP, kBN, kBB, kBR, kBQ, kBK };
enum PieceType : std::int8_t { kPawn, kKnight, kBishop, kRook, kQueen, kKing };
enum Color : std::int8_t { kWhite, kBlack };

inline constexpr int kNumPieceKinds = 12;

constexpr PieceType type_of(PieceKind p) { return static_cast<PieceType>(p % 6); }
constexpr Color color_of(PieceKind p) { return p < 6 ? kWhite : kBlack; }
constexpr PieceKind make_piece(Color c, PieceType t) { return static_cast<PieceKind>(c * 6 + t); }
constexpr Color opposite(Color c) { return c == kWhite ? kBlack : kWhite; }

// Squares are rank * 8 + file, a1 = 0, h8 = 63.
constexpr int square(int file, int rank) { return rank * 8 + file; }
constexpr int file_of(int sq) { return sq & 7; }
constexpr int rank_of(int sq) { return sq >> 3; }
std::string square_name(int sq);
int parse_square(std::string_view s);  // -1 when malformed

enum CastleRight : std::uint8_t { kWhiteKingside = 1, kWhiteQueenside = 2, kBlackKingside = 4, kBlackQueenside = 8 };

struct Move {
  std::int8_t from = 0;
  std::int8_t to = 0;
  PieceType promotion = kPawn;  // kPawn means no promotion
  bool capture = false;
  bool en_passant = false;
  bool castle = false;
  bool double_push = false;

  friend bool operator==(const Move&, const Move&) = default;
};

class Board {
 public:
  static Board initial();
  static Board empty();
  // Minimal FEN reader for test fixtures and diagnostics.
  static Board from_fen(std::string_view fen);
  std::string to_fen() const;

  PieceKind at(int sq) const { return squares_[static_cast<std::size_t>(sq)]; }
  void set(int sq, PieceKind p) { squares_[static_cast<std::size_t>(sq)] = p; }
  Color side_to_move() const { return side_; }
  std::uint8_t castling() const { return castling_; }
  int en_passant() const { return ep_; }
  int halfmove_clock() const { return halfmove_; }
  int fullmove_number() const { return fullmove_; }

  bool is_attacked(int sq, Color by) const;
  int king_square(Color c) const;
  bool in_check(Color c) const;

  std::vector<Move> pseudo_legal_moves() const;
  std::vector<Move> legal_moves() const;

  // Precondition: `m` is legal on this board.
  Board apply(const Move& m) const;

  // Same pieces on the same squares.
  bool same_placement(const Board& other) const { return squares_ == other.squares_; }
  friend bool operator==(const Board&, const Board&) = default;

  // Exactly one king per side and en-passant target on rank 3 or 6.
  bool well_formed() const;

 private:
  std::array<PieceKind, 64> squares_{};
  Color side_ = kWhite;
  std::uint8_t castling_ = 0;
  int ep_ = -1;
  int halfmove_ = 0;
  int fullmove_ = 1;
};

inline Board apply_move(const Board& b, const Move& m) { return b.apply(m); }

/// Finds the unique legal move written by `san`. Trailing check, mate and
/// annotation marks are ignored. Throws IllegalMoveError when nothing
/// matches and AmbiguousMoveError when more than one move does.
Move resolve_san(const Board& board, std::string_view san);

// Syntax check only: piece, disambiguation, capture, square, promotion.
bool is_san_syntax(std::string_view san);

// Standard algebraic notation for a legal move, with minimal disambiguation
// and a '+' or '#' suffix.
std::string to_san(const Board& board, const Move& m);

std::uint64_t perft(const Board& board, int depth);

// 8×8×12 board-state properties: bit (file·8 + rank)·12 + kind.
inline constexpr std::size_t kBspSize = 8 * 8 * 12;
using BspVector = std::bitset<kBspSize>;

constexpr std::size_t bsp_index(int file, int rank, int kind) {
  return static_cast<std::size_t>((file * 8 + rank) * kNumPieceKinds + kind);
}

BspVector board_to_bsp(const Board& board);

// 96-byte little-endian bit packing used by the alignment sidecar.
std::array<std::uint8_t, kBspSize / 8> pack_bsp(const BspVector& v);
BspVector unpack_bsp(const std::uint8_t* bytes);

/// Plays seeded semi-random legal games and writes them as movetext lines
/// (";1.e4 e5 2.Nf3 ..."), each at most `max_chars` long. Checkmates append
/// the result marker.
std::vector<std::string> generate_games(std::size_t count, std::uint64_t seed, std::size_t max_chars = 1023);

}  // namespace moex::chess
