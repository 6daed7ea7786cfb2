#include "moex/chess.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>

#include "moex/error.hpp"

namespace moex::chess {

namespace {

constexpr int kKnightSteps[8][2] = {{1, 2}, {2, 1}, {2, -1}, {1, -2}, {-1, -2}, {-2, -1}, {-2, 1}, {-1, 2}};
constexpr int kKingSteps[8][2] = {{1, 0}, {1, 1}, {0, 1}, {-1, 1}, {-1, 0}, {-1, -1}, {0, -1}, {1, -1}};
constexpr int kRookDirs[4][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
constexpr int kBishopDirs[4][2] = {{1, 1}, {1, -1}, {-1, 1}, {-1, -1}};

constexpr bool on_board(int f, int r) { return f >= 0 && f < 8 && r >= 0 && r < 8; }

constexpr char kPieceChars[] = "PNBRQKpnbrqk";

PieceKind piece_from_char(char c) {
  for (int i = 0; i < kNumPieceKinds; ++i)
    if (kPieceChars[i] == c) return static_cast<PieceKind>(i);
  return kNone;
}

char type_letter(PieceType t) { return "PNBRQK"[t]; }

// Castling rights lost when a move touches the given square.
std::uint8_t rights_cleared_by(int sq) {
  switch (sq) {
    case 0: return kWhiteQueenside;
    case 7: return kWhiteKingside;
    case 4: return kWhiteKingside | kWhiteQueenside;
    case 56: return kBlackQueenside;
    case 63: return kBlackKingside;
    case 60: return kBlackKingside | kBlackQueenside;
    default: return 0;
  }
}

}  // namespace

std::string square_name(int sq) {
  return {static_cast<char>('a' + file_of(sq)), static_cast<char>('1' + rank_of(sq))};
}

int parse_square(std::string_view s) {
  if (s.size() != 2 || s[0] < 'a' || s[0] > 'h' || s[1] < '1' || s[1] > '8') return -1;
  return square(s[0] - 'a', s[1] - '1');
}

Board Board::empty() {
  Board b;
  b.squares_.fill(kNone);
  return b;
}

Board Board::initial() {
  return from_fen("rnbqkbnr/pppppppp/8/8/8/8/PPPPPPPP/RNBQKBNR w KQkq - 0 1");
}

Board Board::from_fen(std::string_view fen) {
  std::istringstream in{std::string(fen)};
  std::string placement, side, castling = "-", ep = "-";
  int half = 0, full = 1;
  in >> placement >> side;
  if (!in) throw FormatError("FEN '" + std::string(fen) + "': missing placement or side");
  in >> castling >> ep >> half >> full;

  Board b = empty();
  int rank = 7, file = 0;
  for (char c : placement) {
    if (c == '/') {
      if (file != 8) throw FormatError("FEN '" + std::string(fen) + "': short rank");
      --rank;
      file = 0;
    } else if (c >= '1' && c <= '8') {
      file += c - '0';
    } else {
      PieceKind p = piece_from_char(c);
      if (p == kNone || file > 7 || rank < 0) throw FormatError("FEN '" + std::string(fen) + "': bad placement");
      b.set(square(file, rank), p);
      ++file;
    }
    if (file > 8) throw FormatError("FEN '" + std::string(fen) + "': long rank");
  }
  if (rank != 0 || file != 8) throw FormatError("FEN '" + std::string(fen) + "': wrong number of squares");
  if (side != "w" && side != "b") throw FormatError("FEN '" + std::string(fen) + "': side must be w or b");
  b.side_ = side == "w" ? kWhite : kBlack;
  for (char c : castling) {
    switch (c) {
      case 'K': b.castling_ |= kWhiteKingside; break;
      case 'Q': b.castling_ |= kWhiteQueenside; break;
      case 'k': b.castling_ |= kBlackKingside; break;
      case 'q': b.castling_ |= kBlackQueenside; break;
      case '-': break;
      default: throw FormatError("FEN '" + std::string(fen) + "': bad castling field");
    }
  }
  if (ep != "-") {
    b.ep_ = parse_square(ep);
    if (b.ep_ < 0) throw FormatError("FEN '" + std::string(fen) + "': bad en-passant square");
  }
  b.halfmove_ = half;
  b.fullmove_ = full;
  return b;
}

std::string Board::to_fen() const {
  std::string out;
  for (int r = 7; r >= 0; --r) {
    int gap = 0;
    for (int f = 0; f < 8; ++f) {
      PieceKind p = at(square(f, r));
      if (p == kNone) {
        ++gap;
        continue;
      }
      if (gap) out += static_cast<char>('0' + gap);
      gap = 0;
      out += kPieceChars[p];
    }
    if (gap) out += static_cast<char>('0' + gap);
    if (r) out += '/';
  }
  out += side_ == kWhite ? " w " : " b ";
  std::string rights;
  if (castling_ & kWhiteKingside) rights += 'K';
  if (castling_ & kWhiteQueenside) rights += 'Q';
  if (castling_ & kBlackKingside) rights += 'k';
  if (castling_ & kBlackQueenside) rights += 'q';
  out += rights.empty() ? "-" : rights;
  out += ' ';
  out += ep_ < 0 ? "-" : square_name(ep_);
  out += ' ' + std::to_string(halfmove_) + ' ' + std::to_string(fullmove_);
  return out;
}

bool Board::is_attacked(int sq, Color by) const {
  const int f = file_of(sq), r = rank_of(sq);
  // Pawns attack diagonally forward, so look backward from the target.
  const int pr = by == kWhite ? r - 1 : r + 1;
  for (int df : {-1, 1})
    if (on_board(f + df, pr) && at(square(f + df, pr)) == make_piece(by, kPawn)) return true;
  for (auto [df, dr] : kKnightSteps)
    if (on_board(f + df, r + dr) && at(square(f + df, r + dr)) == make_piece(by, kKnight)) return true;
  for (auto [df, dr] : kKingSteps)
    if (on_board(f + df, r + dr) && at(square(f + df, r + dr)) == make_piece(by, kKing)) return true;
  auto slide = [&](const int (&dirs)[4][2], PieceType a, PieceType b) {
    for (auto [df, dr] : dirs) {
      for (int nf = f + df, nr = r + dr; on_board(nf, nr); nf += df, nr += dr) {
        PieceKind p = at(square(nf, nr));
        if (p == kNone) continue;
        if (p == make_piece(by, a) || p == make_piece(by, b)) return true;
        break;
      }
    }
    return false;
  };
  return slide(kRookDirs, kRook, kQueen) || slide(kBishopDirs, kBishop, kQueen);
}

int Board::king_square(Color c) const {
  const PieceKind k = make_piece(c, kKing);
  for (int sq = 0; sq < 64; ++sq)
    if (at(sq) == k) return sq;
  return -1;
}

bool Board::in_check(Color c) const {
  const int k = king_square(c);
  return k >= 0 && is_attacked(k, opposite(c));
}

std::vector<Move> Board::pseudo_legal_moves() const {
  std::vector<Move> out;
  out.reserve(48);
  const Color us = side_, them = opposite(side_);
  auto push = [&](int from, int to, bool capture) {
    Move m;
    m.from = static_cast<std::int8_t>(from);
    m.to = static_cast<std::int8_t>(to);
    m.capture = capture;
    out.push_back(m);
  };

  for (int sq = 0; sq < 64; ++sq) {
    const PieceKind p = at(sq);
    if (p == kNone || color_of(p) != us) continue;
    const int f = file_of(sq), r = rank_of(sq);
    switch (type_of(p)) {
      case kPawn: {
        const int dir = us == kWhite ? 1 : -1;
        const int start = us == kWhite ? 1 : 6;
        const int last = us == kWhite ? 7 : 0;
        auto push_pawn = [&](int to, bool capture) {
          if (rank_of(to) == last) {
            for (PieceType t : {kQueen, kRook, kBishop, kKnight}) {
              push(sq, to, capture);
              out.back().promotion = t;
            }
          } else {
            push(sq, to, capture);
          }
        };
        const int one = square(f, r + dir);
        if (at(one) == kNone) {
          push_pawn(one, false);
          const int two = square(f, r + 2 * dir);
          if (r == start && at(two) == kNone) {
            push(sq, two, false);
            out.back().double_push = true;
          }
        }
        for (int df : {-1, 1}) {
          if (!on_board(f + df, r + dir)) continue;
          const int to = square(f + df, r + dir);
          const PieceKind t = at(to);
          if (t != kNone && color_of(t) == them) {
            push_pawn(to, true);
          } else if (to == ep_) {
            push(sq, to, true);
            out.back().en_passant = true;
          }
        }
        break;
      }
      case kKnight:
      case kKing: {
        const auto& steps = type_of(p) == kKnight ? kKnightSteps : kKingSteps;
        for (auto [df, dr] : steps) {
          if (!on_board(f + df, r + dr)) continue;
          const int to = square(f + df, r + dr);
          const PieceKind t = at(to);
          if (t == kNone) push(sq, to, false);
          else if (color_of(t) == them) push(sq, to, true);
        }
        break;
      }
      case kBishop:
      case kRook:
      case kQueen: {
        auto slide = [&](const int (&dirs)[4][2]) {
          for (auto [df, dr] : dirs) {
            for (int nf = f + df, nr = r + dr; on_board(nf, nr); nf += df, nr += dr) {
              const int to = square(nf, nr);
              const PieceKind t = at(to);
              if (t == kNone) {
                push(sq, to, false);
                continue;
              }
              if (color_of(t) == them) push(sq, to, true);
              break;
            }
          }
        };
        if (type_of(p) != kBishop) slide(kRookDirs);
        if (type_of(p) != kRook) slide(kBishopDirs);
        break;
      }
    }
  }

  // Castling: rights held, path empty, king not in check and not passing
  // through or landing on an attacked square.
  const int home = us == kWhite ? 0 : 56;
  const std::uint8_t ks = us == kWhite ? kWhiteKingside : kBlackKingside;
  const std::uint8_t qs = us == kWhite ? kWhiteQueenside : kBlackQueenside;
  if ((castling_ & (ks | qs)) && at(home + 4) == make_piece(us, kKing) && !is_attacked(home + 4, them)) {
    if ((castling_ & ks) && at(home + 7) == make_piece(us, kRook) && at(home + 5) == kNone &&
        at(home + 6) == kNone && !is_attacked(home + 5, them) && !is_attacked(home + 6, them)) {
      push(home + 4, home + 6, false);
      out.back().castle = true;
    }
    if ((castling_ & qs) && at(home) == make_piece(us, kRook) && at(home + 1) == kNone && at(home + 2) == kNone &&
        at(home + 3) == kNone && !is_attacked(home + 3, them) && !is_attacked(home + 2, them)) {
      push(home + 4, home + 2, false);
      out.back().castle = true;
    }
  }
  return out;
}

std::vector<Move> Board::legal_moves() const {
  std::vector<Move> out;
  for (const Move& m : pseudo_legal_moves()) {
    const Board next = apply(m);
    if (!next.in_check(side_)) out.push_back(m);
  }
  return out;
}

Board Board::apply(const Move& m) const {
  Board b = *this;
  const PieceKind p = at(m.from);
  const bool pawn = type_of(p) == kPawn;
  b.set(m.to, m.promotion != kPawn ? make_piece(side_, m.promotion) : p);
  b.set(m.from, kNone);
  if (m.en_passant) b.set(square(file_of(m.to), rank_of(m.from)), kNone);
  if (m.castle) {
    const int home = side_ == kWhite ? 0 : 56;
    const bool kingside = file_of(m.to) == 6;
    const int rook_from = home + (kingside ? 7 : 0);
    const int rook_to = home + (kingside ? 5 : 3);
    b.set(rook_to, b.at(rook_from));
    b.set(rook_from, kNone);
  }
  b.castling_ &= static_cast<std::uint8_t>(~(rights_cleared_by(m.from) | rights_cleared_by(m.to)));
  b.ep_ = m.double_push ? (m.from + m.to) / 2 : -1;
  b.halfmove_ = (pawn || m.capture) ? 0 : halfmove_ + 1;
  if (side_ == kBlack) ++b.fullmove_;
  b.side_ = opposite(side_);
  return b;
}

bool Board::well_formed() const {
  int wk = 0, bk = 0;
  for (PieceKind p : squares_) {
    wk += p == kWK;
    bk += p == kBK;
  }
  if (wk != 1 || bk != 1) return false;
  if (ep_ >= 0 && rank_of(ep_) != 2 && rank_of(ep_) != 5) return false;
  return true;
}

namespace {

struct SanParts {
  PieceType piece = kPawn;
  int from_file = -1;
  int from_rank = -1;
  bool capture = false;
  int to = -1;
  PieceType promotion = kPawn;
  int castle = 0;  // 1 kingside, 2 queenside
};

bool parse_san(std::string_view s, SanParts& out) {
  while (!s.empty() && (s.back() == '+' || s.back() == '#' || s.back() == '!' || s.back() == '?')) s.remove_suffix(1);
  if (s == "O-O" || s == "0-0") {
    out.castle = 1;
    return true;
  }
  if (s == "O-O-O" || s == "0-0-0") {
    out.castle = 2;
    return true;
  }
  if (s.size() >= 2) {
    const char last = s.back();
    const std::string_view promos = "NBRQ";
    if (promos.find(last) != std::string_view::npos) {
      out.promotion = static_cast<PieceType>(kKnight + promos.find(last));
      s.remove_suffix(1);
      if (!s.empty() && s.back() == '=') s.remove_suffix(1);
    }
  }
  if (s.size() < 2) return false;
  out.to = parse_square(s.substr(s.size() - 2));
  if (out.to < 0) return false;
  s.remove_suffix(2);
  if (!s.empty() && std::string_view("NBRQK").find(s.front()) != std::string_view::npos) {
    out.piece = static_cast<PieceType>(kKnight + std::string_view("NBRQK").find(s.front()));
    s.remove_prefix(1);
  }
  if (!s.empty() && s.back() == 'x') {
    out.capture = true;
    s.remove_suffix(1);
  }
  for (char c : s) {
    if (c >= 'a' && c <= 'h' && out.from_file < 0 && out.from_rank < 0) out.from_file = c - 'a';
    else if (c >= '1' && c <= '8' && out.from_rank < 0) out.from_rank = c - '1';
    else return false;
  }
  if (out.promotion != kPawn && out.piece != kPawn) return false;
  return true;
}

}  // namespace

bool is_san_syntax(std::string_view san) {
  SanParts parts;
  return parse_san(san, parts);
}

Move resolve_san(const Board& board, std::string_view san) {
  SanParts parts;
  if (!parse_san(san, parts))
    throw IllegalMoveError("malformed move '" + std::string(san) + "' in position " + board.to_fen());
  std::vector<Move> matches;
  for (const Move& m : board.legal_moves()) {
    const PieceType t = type_of(board.at(m.from));
    if (parts.castle) {
      if (m.castle && (file_of(m.to) == 6) == (parts.castle == 1)) matches.push_back(m);
      continue;
    }
    if (m.castle || t != parts.piece || m.to != parts.to || m.capture != parts.capture) continue;
    if (parts.from_file >= 0 && file_of(m.from) != parts.from_file) continue;
    if (parts.from_rank >= 0 && rank_of(m.from) != parts.from_rank) continue;
    if (m.promotion != parts.promotion) continue;
    matches.push_back(m);
  }
  if (matches.empty())
    throw IllegalMoveError("illegal move '" + std::string(san) + "' in position " + board.to_fen());
  if (matches.size() > 1)
    throw AmbiguousMoveError("ambiguous move '" + std::string(san) + "' matches " + std::to_string(matches.size()) +
                             " moves in position " + board.to_fen());
  return matches.front();
}

std::string to_san(const Board& board, const Move& m) {
  std::string out;
  const PieceType t = type_of(board.at(m.from));
  if (m.castle) {
    out = file_of(m.to) == 6 ? "O-O" : "O-O-O";
  } else if (t == kPawn) {
    if (m.capture) {
      out += static_cast<char>('a' + file_of(m.from));
      out += 'x';
    }
    out += square_name(m.to);
    if (m.promotion != kPawn) {
      out += '=';
      out += type_letter(m.promotion);
    }
  } else {
    out += type_letter(t);
    bool clash = false, same_file = false, same_rank = false;
    for (const Move& o : board.legal_moves()) {
      if (o.to != m.to || o.from == m.from || type_of(board.at(o.from)) != t) continue;
      clash = true;
      same_file |= file_of(o.from) == file_of(m.from);
      same_rank |= rank_of(o.from) == rank_of(m.from);
    }
    if (clash) {
      if (!same_file) out += static_cast<char>('a' + file_of(m.from));
      else if (!same_rank) out += static_cast<char>('1' + rank_of(m.from));
      else out += square_name(m.from);
    }
    if (m.capture) out += 'x';
    out += square_name(m.to);
  }
  const Board next = board.apply(m);
  if (next.in_check(next.side_to_move())) out += next.legal_moves().empty() ? '#' : '+';
  return out;
}

std::uint64_t perft(const Board& board, int depth) {
  if (depth <= 0) return 1;
  const auto moves = board.legal_moves();
  if (depth == 1) return moves.size();
  std::uint64_t n = 0;
  for (const Move& m : moves) n += perft(board.apply(m), depth - 1);
  return n;
}

BspVector board_to_bsp(const Board& board) {
  BspVector v;
  for (int sq = 0; sq < 64; ++sq) {
    const PieceKind p = board.at(sq);
    if (p != kNone) v.set(bsp_index(file_of(sq), rank_of(sq), p));
  }
  return v;
}

std::array<std::uint8_t, kBspSize / 8> pack_bsp(const BspVector& v) {
  std::array<std::uint8_t, kBspSize / 8> out{};
  for (std::size_t i = 0; i < kBspSize; ++i)
    if (v.test(i)) out[i / 8] = static_cast<std::uint8_t>(out[i / 8] | (1u << (i % 8)));
  return out;
}

BspVector unpack_bsp(const std::uint8_t* bytes) {
  BspVector v;
  for (std::size_t i = 0; i < kBspSize; ++i)
    if (bytes[i / 8] & (1u << (i % 8))) v.set(i);
  return v;
}

namespace {

int piece_value(PieceType t) {
  constexpr int kValues[] = {1, 3, 3, 5, 9, 0};
  return kValues[t];
}

}  // namespace

std::vector<std::string> generate_games(std::size_t count, std::uint64_t seed, std::size_t max_chars) {
  std::mt19937_64 rng(seed);
  std::vector<std::string> games;
  games.reserve(count);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t g = 0; g < count; ++g) {
    std::uniform_int_distribution<int> len_dist(20, 200);
    const int target_plies = len_dist(rng);
    Board b = Board::initial();
    std::string line = ";";
    for (int ply = 0; ply < target_plies; ++ply) {
      const auto moves = b.legal_moves();
      if (moves.empty()) break;

      // Prefer mates, then the most valuable capture, otherwise a random move.
      std::vector<std::string> sans;
      sans.reserve(moves.size());
      std::size_t pick = moves.size();
      int best_capture = 0;
      for (std::size_t i = 0; i < moves.size(); ++i) {
        sans.push_back(to_san(b, moves[i]));
        if (sans.back().back() == '#') pick = i;
      }
      if (pick == moves.size() && unit(rng) < 0.6) {
        for (std::size_t i = 0; i < moves.size(); ++i) {
          if (!moves[i].capture) continue;
          const PieceKind victim = b.at(moves[i].to);
          const int v = victim == kNone ? 1 : piece_value(type_of(victim));
          if (v > best_capture) {
            best_capture = v;
            pick = i;
          }
        }
      }
      if (pick == moves.size()) pick = std::uniform_int_distribution<std::size_t>(0, moves.size() - 1)(rng);

      std::string token;
      if (b.side_to_move() == kWhite) token = std::to_string(b.fullmove_number()) + ".";
      token += sans[pick];
      const std::string piece = (line.size() > 1 ? " " : "") + token;
      // Leave room for a result marker after a mate.
      if (line.size() + piece.size() + 4 > max_chars) break;
      line += piece;
      b = b.apply(moves[pick]);
    }
    if (b.legal_moves().empty() && b.in_check(b.side_to_move()))
      line += b.side_to_move() == kWhite ? " 0-1" : " 1-0";
    games.push_back(std::move(line));
  }
  return games;
}

}  // namespace moex::chess
