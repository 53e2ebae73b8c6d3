#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "psyt/corpus.h"
#include "psyt/random.h"

namespace psyt {

// Logistic curriculum: probability that a minibatch slot draws a therapy pair.
struct MixSchedule {
  double N0 = 1e-3;
  double Kcap = 5e-1;
  double r = 2.5e-3;

  void validate() const;
};

void to_json(nlohmann::json& j, const MixSchedule& s);
void from_json(const nlohmann::json& j, MixSchedule& s);

// P(b) = N0 Kcap / ((Kcap - N0) e^{-r b} + N0)
double mixing_probability(double b, const MixSchedule& sched = {});

struct SampleRef {
  Source source = Source::movie;
  std::size_t index = 0;  // position in that source's pool

  bool operator==(const SampleRef&) const = default;
};

inline constexpr std::size_t kDefaultBatchSize = 48;

// Draws minibatches from two pools without replacement. Each pool is visited
// in a per-epoch shuffled order; every slot picks therapy with probability
// P(b), and once a pool runs dry the other one fills the remaining slots.
class MixingSampler {
 public:
  MixingSampler(std::size_t movie_count, std::size_t therapy_count, std::uint64_t seed, MixSchedule sched = {},
                std::size_t batch_size = kDefaultBatchSize);

  // Slots for minibatch b, or nullopt once both pools are exhausted. The
  // last minibatch of an epoch may be short.
  std::optional<std::vector<SampleRef>> next(std::uint64_t b);
  std::optional<std::vector<SampleRef>> next_with_probability(double p_therapy);

  // Moves to the next epoch with freshly shuffled pools.
  void start_next_epoch();

  std::uint64_t epoch() const { return epoch_; }
  std::size_t remaining(Source s) const;
  std::size_t batch_size() const { return batch_size_; }
  const std::vector<std::size_t>& order(Source s) const { return s == Source::movie ? movie_order_ : therapy_order_; }

  nlohmann::json state() const;
  void restore(const nlohmann::json& state);

 private:
  void shuffle_pools();

  std::size_t movie_count_, therapy_count_;
  std::uint64_t seed_;
  MixSchedule sched_;
  std::size_t batch_size_;
  std::uint64_t epoch_ = 0;
  std::vector<std::size_t> movie_order_, therapy_order_;
  std::size_t movie_cursor_ = 0, therapy_cursor_ = 0;
  Rng slot_rng_;
};

}  // namespace psyt
