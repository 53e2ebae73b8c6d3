#include "psyt/text.h"

#include <algorithm>
#include <array>
#include <fstream>
#include <stdexcept>

namespace psyt {

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }
bool is_alpha(char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z'); }
bool is_upper(char c) { return c >= 'A' && c <= 'Z'; }
bool is_word_char(char c) {
  return is_alpha(c) || (c >= '0' && c <= '9') || static_cast<unsigned char>(c) >= 0x80;
}
bool is_block_tag(const std::string& name) {
  static constexpr std::array kBlock{"p", "div", "li", "ul", "ol", "tr", "td", "h1", "h2", "h3", "h4", "h5", "h6",
                                     "blockquote", "section", "article", "table"};
  return std::find(kBlock.begin(), kBlock.end(), name) != kBlock.end();
}
bool is_terminator(char c) { return c == '.' || c == '!' || c == '?'; }

constexpr std::array kAbbreviations{"dr.",  "mr.",  "mrs.", "ms.", "prof.", "st.", "jr.",  "sr.",  "vs.",
                                    "etc.", "e.g.", "i.e.", "mt.", "no.",   "fig.", "inc.", "ltd.", "co.",
                                    "approx.", "dept.", "est.", "gen.", "gov.", "lt.", "sgt.", "capt."};

}  // namespace

std::string clean_html(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  // Block tags separate their neighbours only when both sides are glued text.
  bool pending_break = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (c == '>') continue;
    if (c != '<') {
      if (pending_break && !out.empty() && !is_space(out.back()) && !is_space(c)) out += '\n';
      pending_break = false;
      out += c;
      continue;
    }
    std::size_t j = i + 1;
    if (j < text.size() && text[j] == '/') ++j;
    if (j >= text.size() || !is_alpha(text[j])) continue;
    const std::size_t name_begin = j;
    while (j < text.size() && (is_alpha(text[j]) || (text[j] >= '0' && text[j] <= '9'))) ++j;
    const std::string name = ascii_lower(text.substr(name_begin, j - name_begin));
    std::size_t close = j;
    while (close < text.size() && text[close] != '>' && text[close] != '<') ++close;
    if (close >= text.size() || text[close] != '>') continue;
    if (name == "br") {
      out += '\n';
    } else if (is_block_tag(name)) {
      pending_break = true;
    }
    i = close;
  }
  return out;
}

std::string ascii_lower(std::string_view s) {
  std::string out(s);
  for (char& c : out)
    if (is_upper(c)) c = static_cast<char>(c - 'A' + 'a');
  return out;
}

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && is_space(s[b])) ++b;
  while (e > b && is_space(s[e - 1])) --e;
  return std::string(s.substr(b, e - b));
}

std::string collapse_whitespace(std::string_view s) {
  std::string out;
  bool pending = false;
  for (char c : s) {
    if (is_space(c)) {
      pending = !out.empty();
      continue;
    }
    if (pending) out += ' ';
    pending = false;
    out += c;
  }
  return out;
}

bool is_abbreviation(std::string_view word) {
  const std::string w = ascii_lower(word);
  if (std::find(kAbbreviations.begin(), kAbbreviations.end(), w) != kAbbreviations.end()) return true;
  // Single-letter initials such as "J."
  return word.size() == 2 && is_upper(word[0]) && word[1] == '.';
}

std::vector<std::string> chunk_sentences(std::string_view text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  std::size_t i = 0;
  while (i < text.size()) {
    if (!is_terminator(text[i])) {
      ++i;
      continue;
    }
    std::size_t run_end = i;
    while (run_end < text.size() && is_terminator(text[run_end])) ++run_end;
    while (run_end < text.size() && (text[run_end] == '"' || text[run_end] == ')' || text[run_end] == '\'')) ++run_end;
    std::size_t next = run_end;
    while (next < text.size() && is_space(text[next])) ++next;
    const bool boundary = next > run_end && next < text.size() && is_upper(text[next]);
    if (boundary && run_end == i + 1 && text[i] == '.') {
      std::size_t w = i;
      while (w > start && !is_space(text[w - 1])) --w;
      if (is_abbreviation(text.substr(w, i + 1 - w))) {
        i = run_end;
        continue;
      }
    }
    if (boundary) {
      std::string s = trim(text.substr(start, run_end - start));
      if (!s.empty()) out.push_back(std::move(s));
      start = next;
    }
    i = run_end;
  }
  std::string tail = trim(text.substr(start));
  if (!tail.empty()) out.push_back(std::move(tail));
  return out;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (is_space(c)) {
      ++i;
      continue;
    }
    if (!is_word_char(c)) {
      out.emplace_back(1, c);
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < text.size()) {
      if (is_word_char(text[j])) {
        ++j;
      } else if (text[j] == '\'' && j + 1 < text.size() && is_word_char(text[j + 1])) {
        j += 2;
      } else {
        break;
      }
    }
    out.push_back(ascii_lower(text.substr(i, j - i)));
    i = j;
  }
  return out;
}

bool is_word_token(std::string_view token) { return !token.empty() && is_word_char(token[0]); }

std::string normalise_words(std::string_view text) {
  std::string out;
  for (const std::string& tok : tokenize(text)) {
    if (!is_word_char(tok[0])) continue;
    if (!out.empty()) out += ' ';
    out += tok;
  }
  return out;
}

GreetingLexicon::GreetingLexicon(std::vector<std::string> patterns) {
  for (const std::string& raw : patterns) {
    std::string p = trim(raw);
    Pattern pat;
    if (!p.empty() && p.back() == '*') {
      pat.prefix = true;
      p.pop_back();
    }
    pat.words = normalise_words(p);
    if (pat.words.empty()) throw std::invalid_argument("greeting pattern '" + raw + "' has no words");
    patterns_.push_back(std::move(pat));
  }
}

GreetingLexicon GreetingLexicon::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open greeting lexicon " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    lines.push_back(t);
  }
  return GreetingLexicon(std::move(lines));
}

GreetingLexicon GreetingLexicon::builtin() {
  return GreetingLexicon({"hi", "hi there", "hello", "hello there", "hey", "hey there", "greetings",
                          "good morning", "good afternoon", "good evening", "thanks for writing in",
                          "thanks for writing", "thank you for writing", "thank you for writing in",
                          "thanks for reaching out", "thank you for reaching out", "thanks for your question",
                          "thank you for your question", "thank you for sharing", "thanks for sharing"});
}

bool GreetingLexicon::matches(std::string_view sentence) const {
  const std::string n = normalise_words(sentence);
  for (const Pattern& p : patterns_) {
    if (n == p.words) return true;
    if (p.prefix && n.size() > p.words.size() && n.compare(0, p.words.size(), p.words) == 0 &&
        n[p.words.size()] == ' ')
      return true;
  }
  return false;
}

std::vector<std::string> drop_leading_niceties(std::span<const std::string> sentences, const GreetingLexicon& lex) {
  std::size_t i = 0;
  while (i < sentences.size() && lex.matches(sentences[i])) ++i;
  return {sentences.begin() + static_cast<std::ptrdiff_t>(i), sentences.end()};
}

}  // namespace psyt
