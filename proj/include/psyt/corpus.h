#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "psyt/text.h"

namespace psyt {

enum class Source { movie, therapy };

const char* source_name(Source s);
Source parse_source(const std::string& name);

struct UtterancePair {
  std::string prompt;
  std::string response;
  Source source = Source::movie;

  bool operator==(const UtterancePair&) const = default;
};

class CorpusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LoadStats {
  std::size_t lines = 0;
  std::size_t malformed = 0;      // lines skipped for bad field counts
  std::size_t empty_dropped = 0;  // pairs with a side empty after cleaning
  std::size_t nicety_dropped = 0; // therapy rows reduced to nothing by greeting removal
};

// Movie dialogue: either " +++$+++ "-delimited line records (lineID, character,
// movie, name, text) with an optional movie_conversations.txt beside them, or
// a two-column TSV of prompt<TAB>response. Without a conversations file, runs
// of consecutive line numbers within one movie form a conversation.
std::vector<UtterancePair> load_movie_corpus(const std::string& path, LoadStats* stats = nullptr);

// Sentence-pair scorer used to align answer sentences to question sentences.
using Similarity = std::function<double(const std::string& question, const std::string& answer)>;

// |tokens(q) ∩ tokens(a)| / |tokens(q) ∪ tokens(a)| over distinct word tokens.
double token_overlap(const std::string& question, const std::string& answer);

// Order-preserving alignment: result[j] is the question index for answer j,
// non-decreasing in j, maximising the summed similarity. Ties resolve to the
// lexicographically smallest assignment.
std::vector<std::size_t> align_sentences(std::span<const std::string> q_sents, std::span<const std::string> a_sents,
                                         const Similarity& similarity);

// Drops leading greeting sentences on both sides, aligns, and emits one
// therapy pair per answer sentence. Returns an empty list when either side is
// empty after nicety removal.
std::vector<UtterancePair> pair_sentences(std::span<const std::string> q_sents, std::span<const std::string> a_sents,
                                          const Similarity& similarity, const GreetingLexicon& lexicon);

// Therapy CSV with header columns question_text and answer_text (HTML allowed).
std::vector<UtterancePair> load_therapy_csv(const std::string& path, const GreetingLexicon& lexicon,
                                            const Similarity& similarity = token_overlap, LoadStats* stats = nullptr);

// Rarity of a word is -ln(count / total) over all word tokens of the corpus.
// A pair is discarded when either side contains a word whose rarity exceeds
// mean + sigma * stddev (population, over distinct words).
std::vector<UtterancePair> filter_rare_phrases(std::span<const UtterancePair> pairs, double sigma = 3.0);
double rarity_threshold(std::span<const UtterancePair> pairs, double sigma);

}  // namespace psyt
