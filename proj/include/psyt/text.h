#pragma once

#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace psyt {

// Strips markup tags, keeping their content. <br>, <br/> and <br /> become a
// newline; block tags (p, div, li, ...) become a newline only where they would
// otherwise glue two words together. Stray '<' and '>' are dropped.
std::string clean_html(std::string_view text);

std::string ascii_lower(std::string_view s);
std::string trim(std::string_view s);
// Trims and folds every whitespace run to one space.
std::string collapse_whitespace(std::string_view s);

// Splits on runs of . ! ? followed by whitespace and an upper-case letter,
// unless the word ending there is a known abbreviation ("Dr.", "e.g." ...).
std::vector<std::string> chunk_sentences(std::string_view text);
bool is_abbreviation(std::string_view word);

// Lower-cased word tokens. Letters, digits and bytes >= 0x80 form words;
// an apostrophe between two word characters stays inside the word; every
// other non-space character is a token of its own.
std::vector<std::string> tokenize(std::string_view text);
bool is_word_token(std::string_view token);

// Greeting/nicety patterns. Each pattern is a normalised word sequence
// (lower case, punctuation removed); a trailing "*" matches any continuation.
class GreetingLexicon {
 public:
  GreetingLexicon() = default;
  explicit GreetingLexicon(std::vector<std::string> patterns);
  // One pattern per line; blank lines and lines starting with '#' are skipped.
  static GreetingLexicon load(const std::string& path);
  static GreetingLexicon builtin();

  bool matches(std::string_view sentence) const;
  std::size_t size() const { return patterns_.size(); }

 private:
  struct Pattern {
    std::string words;
    bool prefix = false;
  };
  std::vector<Pattern> patterns_;
};

// Lower-case words joined by single spaces, punctuation dropped.
std::string normalise_words(std::string_view text);

// Drops leading sentences that match the lexicon.
std::vector<std::string> drop_leading_niceties(std::span<const std::string> sentences, const GreetingLexicon& lex);

}  // namespace psyt
