#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "moex/chess.hpp"

namespace moex::chess {

struct Game {
  std::vector<std::string> moves;          // SAN, in order
  std::vector<std::size_t> move_end;       // offset in `text` just past each SAN token
  std::string result;                      // "1-0", "0-1", "1/2-1/2", "*" or empty
  std::string text;                        // source span of this game
  std::size_t source_offset = 0;           // byte offset of `text` in the parsed input
};

/// Splits movetext into games. Each line is a game and ';' also starts a
/// new one. Move numbers are stripped; result markers are kept aside.
/// Malformed tokens throw ParseError naming the byte offset and game index.
std::vector<Game> parse_pgn(std::string_view text);

// Removes header lines, {comments}, (variations) and $NAGs, and collapses
// whitespace inside each line.
std::string strip_pgn_markup(std::string_view text);

// Canonical movetext: ";1.e4 e5 2.Nf3" plus the result marker, if any.
std::string serialize_game(const Game& game);

class Vocab {
 public:
  Vocab() = default;
  explicit Vocab(std::string chars);  // distinct characters, id = position

  std::size_t size() const { return chars_.size(); }
  const std::string& chars() const { return chars_; }
  char char_of(int id) const;
  int id_of(char c) const { return ids_[static_cast<unsigned char>(c)]; }
  bool contains(char c) const { return id_of(c) >= 0; }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.chars_ == b.chars_; }

 private:
  std::string chars_;
  std::array<int, 256> ids_ = filled_ids();

  static std::array<int, 256> filled_ids() {
    std::array<int, 256> a;
    a.fill(-1);
    return a;
  }
};

// Sorted distinct characters of the corpus, newlines excluded.
Vocab build_vocab(std::string_view corpus);

// The 32 characters of chess movetext.
Vocab movetext_vocab();

/// Maps characters to ids. An unknown character throws FormatError naming
/// it and its offset.
std::vector<std::uint8_t> tokenize(std::string_view text, const Vocab& vocab);
std::string detokenize(std::span<const std::uint8_t> ids, const Vocab& vocab);

struct Alignment {
  std::size_t token_index;  // offset in the game text
  Board board;              // position after the ply
};

/// One point per ply: the character right after its SAN token (a space, or
/// one past the end of the game), paired with the board after the ply.
std::vector<Alignment> align_tokens_to_boards(const Game& game);

// Replays a game from the initial position. Throws on illegal or ambiguous
// moves, naming the ply.
std::vector<Board> replay(const Game& game);

}  // namespace moex::chess
