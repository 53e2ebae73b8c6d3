#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "psyt/corpus.h"
#include "psyt/mixing.h"
#include "psyt/transformer.h"
#include "psyt/vocab.h"

namespace psyt {

struct PreparedRecord {
  Source source = Source::movie;
  TokenSeq prompt;    // encoder input, max_len long
  TokenSeq response;  // target, max_len long

  bool operator==(const PreparedRecord&) const = default;
};

struct PreparedDataset {
  Vocab vocab;
  std::size_t max_len = 0;
  std::uint64_t seed = 0;
  std::vector<PreparedRecord> records;

  // Record indices of one source, in file order.
  std::vector<std::size_t> pool(Source s) const;
  std::size_t count(Source s) const;
  bool operator==(const PreparedDataset&) const = default;
};

// One JSON header line (format, version, vocab, max_len, counts, seed), then
// per record: u8 source, max_len int32 prompt ids, max_len int32 response ids,
// all little-endian.
void write_prepared(std::ostream& out, const PreparedDataset& ds);
PreparedDataset read_prepared(std::istream& in);
void save_prepared(const std::string& path, const PreparedDataset& ds);
PreparedDataset load_prepared(const std::string& path);

struct PrepareConfig {
  std::string movie_path;
  std::string therapy_path;    // optional
  std::string greetings_path;  // optional, built-in lexicon otherwise
  std::size_t vocab_cap = kDefaultVocabCap;
  std::size_t max_len_ceiling = 64;
  double sigma = 3.0;
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const PrepareConfig& c);
void from_json(const nlohmann::json& j, PrepareConfig& c);

struct PrepareStats {
  LoadStats movie, therapy;
  std::size_t movie_pairs = 0, therapy_pairs = 0;  // after loading
  std::size_t kept_pairs = 0;                      // after rarity filtering
  std::size_t longest = 0;                         // longest encoded length before the ceiling
};

// load -> rarity filter -> vocab -> encode. max_len is the longest encoded
// utterance (tokens + sos + eos), clamped to max_len_ceiling.
PreparedDataset prepare_dataset(const PrepareConfig& config, PrepareStats* stats = nullptr);
PreparedDataset encode_pairs(std::span<const UtterancePair> pairs, const Vocab& vocab, std::size_t max_len,
                             std::uint64_t seed);

struct MiniBatch {
  TokenBatch src;
  TokenBatch dec_in;  // right_shift(tgt) row-wise
  TokenBatch tgt;
  std::size_t size() const { return src.batch; }
};

// Rows of the referenced records, with trailing columns that are pad in every
// row trimmed away (separately for prompts and responses).
MiniBatch make_minibatch(const PreparedDataset& ds, std::span<const std::size_t> record_ids);
MiniBatch make_minibatch(const PreparedDataset& ds, std::span<const SampleRef> refs);
// Row-wise concatenation, padding to the longer length.
MiniBatch concat_minibatches(std::span<const MiniBatch> parts);

}  // namespace psyt
