#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <string>

#include "psyt/autograd.h"
#include "psyt/dataset.h"
#include "psyt/random.h"
#include "psyt/tensor.h"

namespace psyt::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = uniform(rng, lo, hi);
  return t;
}

// sum(y .* w) with its own one-line backward; test-only contraction helper.
inline Var weighted_sum(Var y, const Tensor& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += y.value()[i] * w[i];
  return y.tape->record(Tensor({1}, std::vector<double>{s}), {y}, [y, w](Tape& t, const Tensor& g, const Tensor&) {
    Tensor& gy = t.grad_slot(y);
    for (std::size_t i = 0; i < w.size(); ++i) gy[i] += g[0] * w[i];
  });
}

// Copy task: the response repeats the prompt. `vocab_size` counts the four
// reserved ids; word lengths are drawn from [min_words, max_words].
inline PreparedDataset copy_dataset(std::size_t pairs, std::size_t vocab_size, std::size_t min_words,
                                    std::size_t max_words, std::uint64_t seed) {
  std::vector<std::string> tokens = kReservedTokens;
  for (std::size_t i = tokens.size(); i < vocab_size; ++i) tokens.push_back("w" + std::to_string(i));
  PreparedDataset ds;
  ds.vocab = Vocab(tokens);
  ds.max_len = max_words + 2;
  ds.seed = seed;
  Rng rng(seed);
  for (std::size_t p = 0; p < pairs; ++p) {
    const std::size_t n = min_words + uniform_index(rng, max_words - min_words + 1);
    TokenSeq seq(ds.max_len, kPadId);
    seq[0] = kSosId;
    for (std::size_t i = 1; i <= n; ++i)
      seq[i] = static_cast<TokenId>(kNumReserved + uniform_index(rng, vocab_size - kNumReserved));
    seq[n + 1] = kEosId;
    ds.records.push_back({Source::movie, seq, seq});
  }
  return ds;
}

inline std::filesystem::path source_dir() { return PSYT_SOURCE_DIR; }
inline std::filesystem::path golden_dir() { return source_dir() / "tests" / "golden"; }
inline std::filesystem::path data_dir() { return source_dir() / "data"; }
inline std::filesystem::path fixture_dir() { return source_dir() / "tests" / "fixtures"; }

// Fresh empty scratch directory for one test.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "psyt-tests" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Set PSYT_REGEN_GOLDEN=1 to rewrite golden files from the current build.
inline bool regenerate_golden() {
  const char* v = std::getenv("PSYT_REGEN_GOLDEN");
  return v && std::string(v) == "1";
}

}  // namespace psyt::testing
