#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "psyt/checkpoint.h"
#include "psyt/dataset.h"
#include "psyt/mixing.h"
#include "psyt/optim.h"
#include "psyt/transformer.h"

namespace psyt {

struct TrainConfig {
  double base_lr = 5.7e-2;
  std::size_t warmup_steps = 4000;
  std::size_t accumulation = 32;
  std::size_t minibatch = 48;
  std::size_t max_epochs = 1;
  std::size_t max_updates = 0;  // 0: no limit
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 500;  // applied updates; 0 disables periodic checkpoints
  bool checkpoint_each_epoch = true;
  ModelConfig model;  // vocab_size and max_len are taken from the dataset
  MixSchedule mix;
  AdamConfig adam;

  // Paths used by the CLI driver.
  std::string dataset;
  std::string out_dir = "run";

  std::size_t effective_batch() const { return accumulation * minibatch; }
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
// Accepts an optional "effective_batch" entry, which must equal accumulation * minibatch.
void from_json(const nlohmann::json& j, TrainConfig& c);

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// LR(s) = base_lr * min(1 / sqrt(s + 1e-8), s * warmup^-1.5), s = applied updates, s >= 1.
double lr_schedule(std::uint64_t s, const TrainConfig& cfg);

struct LossRecord {
  std::uint64_t step = 0;  // minibatches processed, from 1
  std::uint64_t epoch = 0; // from 1
  double loss = 0.0;
  double lr = 0.0;         // rate of the update this minibatch contributes to

  bool operator==(const LossRecord&) const = default;
};

class LossLog {
 public:
  void append(const LossRecord& r);  // steps must strictly increase
  const std::vector<LossRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  void truncate_after(std::uint64_t step);

  // CSV "step,epoch,loss,lr", doubles at round-trip precision.
  void write_csv(std::ostream& out) const;
  static std::string csv_header();
  static std::string csv_line(const LossRecord& r);
  static LossLog read_csv(std::istream& in);

 private:
  std::vector<LossRecord> records_;
};

// Least-squares slope of loss against step over the trailing `window` records.
double convergence_rate(const LossLog& log, std::size_t window);

// One forward/backward pass; adds weight * dLoss/dParams into grad_acc and
// returns the (unweighted) mean masked loss of the minibatch.
double accumulate_gradients(const TransformerParams& params, const ModelConfig& config, const MiniBatch& batch,
                            TransformerParams& grad_acc, double weight);

struct OptimizerState {
  std::vector<AdamState> slots;  // one per parameter, visit order
  static OptimizerState for_params(const TransformerParams& params, const AdamConfig& cfg);
};

void apply_adam(TransformerParams& params, const TransformerParams& grads, OptimizerState& opt, double lr);

struct StepResult {
  LossRecord record;
  bool applied = false;  // an optimizer update happened after this minibatch
  bool epoch_end = false;
};

// Drives curriculum-sampled minibatches through accumulation and Adam.
// Everything that influences future steps lives in the checkpoint's "TRNS"
// section, so resuming reproduces the uninterrupted run bit for bit.
class Trainer {
 public:
  Trainer(const PreparedDataset& data, TrainConfig config);
  // Continues from a checkpoint written by this class.
  Trainer(const PreparedDataset& data, TrainConfig config, const Checkpoint& resume_from);

  // Processes one minibatch; nullopt once max_epochs or max_updates is reached.
  std::optional<StepResult> step();

  // Runs to completion. on_step may return false to stop early.
  void run(const std::function<bool(const StepResult&)>& on_step = {});

  Checkpoint checkpoint() const;

  const TransformerParams& params() const { return params_; }
  const TrainConfig& config() const { return config_; }
  const ModelConfig& model_config() const { return config_.model; }
  const LossLog& log() const { return log_; }
  LossLog& log() { return log_; }
  std::uint64_t updates() const { return updates_; }
  std::uint64_t minibatches() const { return minibatches_; }
  std::uint64_t epoch() const { return sampler_.epoch() + 1; }
  std::size_t pending() const { return accumulated_; }
  bool finished() const;

 private:
  const PreparedDataset& data_;
  TrainConfig config_;
  TransformerParams params_;
  TransformerParams grad_acc_;
  OptimizerState opt_;
  MixingSampler sampler_;
  std::vector<std::size_t> movie_pool_, therapy_pool_;
  std::uint64_t updates_ = 0;
  std::uint64_t minibatches_ = 0;
  std::uint64_t epoch_batch_ = 0;  // minibatch index inside the current epoch
  std::size_t accumulated_ = 0;
  LossLog log_;
};

inline constexpr const char* kTrainSectionTag = "TRNS";

// Model-only checkpoint for inference: config, vocab and f32 weights.
Checkpoint inference_checkpoint(const TransformerParams& params, const ModelConfig& config, const Vocab& vocab);

// File-backed driver used by the CLI: writes loss.csv and checkpoints into
// config.out_dir ("step-<updates>.psyt", "epoch-<n>.psyt", "final.psyt").
struct TrainRunResult {
  std::filesystem::path final_checkpoint;
  std::uint64_t updates = 0;
  std::uint64_t minibatches = 0;
};
TrainRunResult run_training(const PreparedDataset& data, const TrainConfig& config,
                            const std::optional<std::filesystem::path>& resume = std::nullopt,
                            std::ostream* progress = nullptr);

}  // namespace psyt
