#include "moex/pgn.hpp"

#include <algorithm>
#include <cctype>

#include "moex/error.hpp"

namespace moex::chess {

namespace {

bool is_result(std::string_view tok) { return tok == "1-0" || tok == "0-1" || tok == "1/2-1/2" || tok == "*"; }

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\r'; }

void parse_segment(std::string_view input, std::size_t begin, std::size_t end, std::vector<Game>& out) {
  Game g;
  g.text = std::string(input.substr(begin, end - begin));
  g.source_offset = begin;
  const std::string_view seg = g.text;
  const std::size_t game_index = out.size();
  std::size_t i = seg.empty() || seg[0] != ';' ? 0 : 1;
  bool any = false;
  while (i < seg.size()) {
    if (is_space(seg[i])) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < seg.size() && !is_space(seg[j])) ++j;
    std::string_view tok = seg.substr(i, j - i);
    const std::size_t tok_start = i;
    i = j;
    any = true;
    if (!g.result.empty())
      throw ParseError("game " + std::to_string(game_index) + ": token '" + std::string(tok) + "' after result at byte " +
                       std::to_string(begin + tok_start));
    if (is_result(tok)) {
      g.result = std::string(tok);
      continue;
    }
    std::size_t k = 0;
    while (k < tok.size() && std::isdigit(static_cast<unsigned char>(tok[k]))) ++k;
    if (k > 0 && k < tok.size() && tok[k] == '.') {
      while (k < tok.size() && tok[k] == '.') ++k;
      tok.remove_prefix(k);
      if (tok.empty()) continue;  // "12." on its own
    }
    if (!is_san_syntax(tok))
      throw ParseError("game " + std::to_string(game_index) + ": malformed token '" +
                       std::string(seg.substr(tok_start, j - tok_start)) + "' at byte " +
                       std::to_string(begin + tok_start));
    g.moves.emplace_back(tok);
    g.move_end.push_back(j);
  }
  if (any) out.push_back(std::move(g));
}

}  // namespace

std::vector<Game> parse_pgn(std::string_view text) {
  std::vector<Game> out;
  std::size_t line_start = 0;
  while (line_start <= text.size()) {
    std::size_t line_end = text.find('\n', line_start);
    if (line_end == std::string_view::npos) line_end = text.size();
    std::size_t seg_start = line_start;
    for (std::size_t p = line_start; p <= line_end; ++p) {
      if (p == line_end || (text[p] == ';' && p > seg_start)) {
        parse_segment(text, seg_start, p, out);
        seg_start = p;
      }
    }
    line_start = line_end + 1;
  }
  return out;
}

std::string strip_pgn_markup(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  int brace = 0, paren = 0;
  bool line_start = true, header = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (c == '\n') {
      header = false;
      line_start = true;
      if (brace == 0 && paren == 0) out += '\n';
      continue;
    }
    if (header) continue;
    if (line_start && c == '[' && brace == 0 && paren == 0) {
      header = true;
      continue;
    }
    line_start = false;
    if (c == '{') ++brace;
    else if (c == '}' && brace > 0) --brace;
    else if (brace > 0) continue;
    else if (c == '(') ++paren;
    else if (c == ')' && paren > 0) --paren;
    else if (paren > 0) continue;
    else if (c == '$') {
      while (i + 1 < text.size() && std::isdigit(static_cast<unsigned char>(text[i + 1]))) ++i;
    } else {
      out += c;
    }
  }
  // Collapse runs of blanks and trim each line.
  std::string collapsed;
  collapsed.reserve(out.size());
  std::size_t pos = 0;
  while (pos <= out.size()) {
    std::size_t nl = out.find('\n', pos);
    if (nl == std::string::npos) nl = out.size();
    std::string line;
    bool gap = false;
    for (std::size_t i = pos; i < nl; ++i) {
      if (is_space(out[i])) {
        gap = !line.empty();
      } else {
        if (gap) line += ' ';
        gap = false;
        line += out[i];
      }
    }
    if (!line.empty()) {
      collapsed += line;
      collapsed += '\n';
    }
    pos = nl + 1;
  }
  return collapsed;
}

std::string serialize_game(const Game& game) {
  std::string out = ";";
  for (std::size_t i = 0; i < game.moves.size(); ++i) {
    if (i > 0) out += ' ';
    if (i % 2 == 0) out += std::to_string(i / 2 + 1) + ".";
    out += game.moves[i];
  }
  if (!game.result.empty()) {
    if (!game.moves.empty()) out += ' ';
    out += game.result;
  }
  return out;
}

Vocab::Vocab(std::string chars) : chars_(std::move(chars)) {
  for (std::size_t i = 0; i < chars_.size(); ++i) {
    auto& slot = ids_[static_cast<unsigned char>(chars_[i])];
    if (slot >= 0) throw FormatError(std::string("vocabulary repeats character '") + chars_[i] + "'");
    slot = static_cast<int>(i);
  }
  if (chars_.size() > 256) throw FormatError("vocabulary larger than 256 characters");
}

char Vocab::char_of(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= chars_.size())
    throw FormatError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(chars_.size()));
  return chars_[static_cast<std::size_t>(id)];
}

Vocab build_vocab(std::string_view corpus) {
  std::array<bool, 256> seen{};
  for (char c : corpus) seen[static_cast<unsigned char>(c)] = true;
  seen['\n'] = false;
  std::string chars;
  for (int c = 0; c < 256; ++c)
    if (seen[static_cast<std::size_t>(c)]) chars += static_cast<char>(c);
  return Vocab(std::move(chars));
}

Vocab movetext_vocab() { return Vocab(" #+-.0123456789;=BKNOQRabcdefghx"); }

std::vector<std::uint8_t> tokenize(std::string_view text, const Vocab& vocab) {
  std::vector<std::uint8_t> ids(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    const int id = vocab.id_of(text[i]);
    if (id < 0) {
      const unsigned char c = static_cast<unsigned char>(text[i]);
      const std::string shown = std::isprint(c) ? std::string(1, text[i]) : "\\x" + std::to_string(c);
      throw ParseError("character '" + shown + "' at offset " + std::to_string(i) + " is not in the vocabulary");
    }
    ids[i] = static_cast<std::uint8_t>(id);
  }
  return ids;
}

std::string detokenize(std::span<const std::uint8_t> ids, const Vocab& vocab) {
  std::string out(ids.size(), ' ');
  for (std::size_t i = 0; i < ids.size(); ++i) out[i] = vocab.char_of(ids[i]);
  return out;
}

std::vector<Board> replay(const Game& game) {
  std::vector<Board> boards;
  boards.reserve(game.moves.size());
  Board b = Board::initial();
  for (std::size_t i = 0; i < game.moves.size(); ++i) {
    try {
      b = b.apply(resolve_san(b, game.moves[i]));
    } catch (const Error& e) {
      const std::string where = "ply " + std::to_string(i + 1) + ": ";
      if (dynamic_cast<const AmbiguousMoveError*>(&e)) throw AmbiguousMoveError(where + e.what());
      throw IllegalMoveError(where + e.what());
    }
    boards.push_back(b);
  }
  return boards;
}

std::vector<Alignment> align_tokens_to_boards(const Game& game) {
  auto boards = replay(game);
  std::vector<Alignment> out;
  out.reserve(boards.size());
  for (std::size_t i = 0; i < boards.size(); ++i) out.push_back({game.move_end[i], std::move(boards[i])});
  return out;
}

}  // namespace moex::chess
