#include "psyt/mixing.h"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace psyt {

void MixSchedule::validate() const {
  if (!(N0 > 0.0 && N0 < Kcap && Kcap <= 1.0)) throw std::invalid_argument("mix schedule needs 0 < N0 < Kcap <= 1");
  if (!(r > 0.0)) throw std::invalid_argument("mix schedule needs r > 0");
}

void to_json(nlohmann::json& j, const MixSchedule& s) { j = {{"N0", s.N0}, {"Kcap", s.Kcap}, {"r", s.r}}; }

void from_json(const nlohmann::json& j, MixSchedule& s) {
  s.N0 = j.value("N0", s.N0);
  s.Kcap = j.value("Kcap", s.Kcap);
  s.r = j.value("r", s.r);
  s.validate();
}

double mixing_probability(double b, const MixSchedule& sched) {
  if (!(b >= 0.0)) throw std::invalid_argument("mixing_probability: batch index must be >= 0");
  return sched.N0 * sched.Kcap / ((sched.Kcap - sched.N0) * std::exp(-sched.r * b) + sched.N0);
}

MixingSampler::MixingSampler(std::size_t movie_count, std::size_t therapy_count, std::uint64_t seed,
                             MixSchedule sched, std::size_t batch_size)
    : movie_count_(movie_count),
      therapy_count_(therapy_count),
      seed_(seed),
      sched_(sched),
      batch_size_(batch_size),
      slot_rng_(splitmix64(seed ^ 0x736c6f7473ULL)) {
  sched_.validate();
  if (movie_count + therapy_count == 0) throw std::invalid_argument("sampler needs at least one non-empty pool");
  if (batch_size == 0) throw std::invalid_argument("sampler batch size must be positive");
  shuffle_pools();
}

void MixingSampler::shuffle_pools() {
  auto fill = [&](std::vector<std::size_t>& order, std::size_t n, std::uint64_t salt) {
    order.resize(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(splitmix64(seed_ ^ splitmix64(epoch_ * 2 + salt)));
    shuffle(std::span<std::size_t>(order), rng);
  };
  fill(movie_order_, movie_count_, 0);
  fill(therapy_order_, therapy_count_, 1);
  movie_cursor_ = therapy_cursor_ = 0;
}

void MixingSampler::start_next_epoch() {
  ++epoch_;
  shuffle_pools();
}

std::size_t MixingSampler::remaining(Source s) const {
  return s == Source::movie ? movie_count_ - movie_cursor_ : therapy_count_ - therapy_cursor_;
}

std::optional<std::vector<SampleRef>> MixingSampler::next(std::uint64_t b) {
  return next_with_probability(mixing_probability(static_cast<double>(b), sched_));
}

std::optional<std::vector<SampleRef>> MixingSampler::next_with_probability(double p_therapy) {
  if (remaining(Source::movie) + remaining(Source::therapy) == 0) return std::nullopt;
  std::vector<SampleRef> slots;
  slots.reserve(batch_size_);
  while (slots.size() < batch_size_) {
    const bool movie_left = movie_cursor_ < movie_count_;
    const bool therapy_left = therapy_cursor_ < therapy_count_;
    if (!movie_left && !therapy_left) break;
    bool therapy;
    if (movie_left && therapy_left) {
      therapy = uniform01(slot_rng_) < p_therapy;
    } else {
      therapy = therapy_left;
    }
    if (therapy) {
      slots.push_back({Source::therapy, therapy_order_[therapy_cursor_++]});
    } else {
      slots.push_back({Source::movie, movie_order_[movie_cursor_++]});
    }
  }
  return slots;
}

nlohmann::json MixingSampler::state() const {
  return {{"seed", seed_},
          {"epoch", epoch_},
          {"movie_cursor", movie_cursor_},
          {"therapy_cursor", therapy_cursor_},
          {"rng", rng_state(slot_rng_)}};
}

void MixingSampler::restore(const nlohmann::json& state) {
  if (state.at("seed").get<std::uint64_t>() != seed_) throw std::invalid_argument("sampler state from another seed");
  epoch_ = state.at("epoch").get<std::uint64_t>();
  shuffle_pools();
  movie_cursor_ = state.at("movie_cursor").get<std::size_t>();
  therapy_cursor_ = state.at("therapy_cursor").get<std::size_t>();
  if (movie_cursor_ > movie_count_ || therapy_cursor_ > therapy_count_)
    throw std::invalid_argument("sampler state cursors exceed pool sizes");
  restore_rng_state(slot_rng_, state.at("rng").get<std::string>());
}

}  // namespace psyt
