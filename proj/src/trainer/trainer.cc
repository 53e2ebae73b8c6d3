#include "psyt/trainer.h"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "psyt/random.h"

namespace psyt {

void TrainConfig::validate() const {
  if (warmup_steps == 0) throw std::invalid_argument("warmup_steps must be positive");
  if (accumulation == 0 || minibatch == 0) throw std::invalid_argument("accumulation and minibatch must be positive");
  if (!(base_lr >= 0.0) || !std::isfinite(base_lr)) throw std::invalid_argument("base_lr must be finite and >= 0");
  mix.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"base_lr", c.base_lr},
       {"warmup_steps", c.warmup_steps},
       {"accumulation", c.accumulation},
       {"minibatch", c.minibatch},
       {"effective_batch", c.effective_batch()},
       {"max_epochs", c.max_epochs},
       {"max_updates", c.max_updates},
       {"seed", c.seed},
       {"checkpoint_every", c.checkpoint_every},
       {"checkpoint_each_epoch", c.checkpoint_each_epoch},
       {"model", c.model},
       {"mix", c.mix},
       {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"epsilon", c.adam.epsilon}}},
       {"dataset", c.dataset},
       {"out_dir", c.out_dir}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.base_lr = j.value("base_lr", c.base_lr);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.accumulation = j.value("accumulation", c.accumulation);
  c.minibatch = j.value("minibatch", c.minibatch);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.max_updates = j.value("max_updates", c.max_updates);
  c.seed = j.value("seed", c.seed);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.checkpoint_each_epoch = j.value("checkpoint_each_epoch", c.checkpoint_each_epoch);
  if (j.contains("model")) {
    nlohmann::json merged = c.model;
    merged.update(j.at("model"));
    c.model = merged.get<ModelConfig>();
  }
  if (j.contains("mix")) c.mix = j.at("mix").get<MixSchedule>();
  if (j.contains("adam")) {
    const auto& a = j.at("adam");
    c.adam.beta1 = a.value("beta1", c.adam.beta1);
    c.adam.beta2 = a.value("beta2", c.adam.beta2);
    c.adam.epsilon = a.value("epsilon", c.adam.epsilon);
  }
  c.dataset = j.value("dataset", c.dataset);
  c.out_dir = j.value("out_dir", c.out_dir);
  if (j.contains("effective_batch") && j.at("effective_batch").get<std::size_t>() != c.effective_batch()) {
    throw std::invalid_argument("effective_batch " + j.at("effective_batch").dump() + " != accumulation x minibatch (" +
                                std::to_string(c.effective_batch()) + ")");
  }
  c.validate();
}

double lr_schedule(std::uint64_t s, const TrainConfig& cfg) {
  if (s == 0) throw std::invalid_argument("lr_schedule: step must be >= 1");
  const double sd = static_cast<double>(s);
  const double decay = 1.0 / std::sqrt(sd + 1e-8);
  const double warm = sd * std::pow(static_cast<double>(cfg.warmup_steps), -1.5);
  return cfg.base_lr * std::min(decay, warm);
}

void LossLog::append(const LossRecord& r) {
  if (!records_.empty() && r.step <= records_.back().step)
    throw std::invalid_argument("loss log steps must strictly increase");
  records_.push_back(r);
}

void LossLog::truncate_after(std::uint64_t step) {
  while (!records_.empty() && records_.back().step > step) records_.pop_back();
}

std::string LossLog::csv_header() { return "step,epoch,loss,lr"; }

std::string LossLog::csv_line(const LossRecord& r) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%llu,%llu,%.17g,%.17g", static_cast<unsigned long long>(r.step),
                static_cast<unsigned long long>(r.epoch), r.loss, r.lr);
  return buf;
}

void LossLog::write_csv(std::ostream& out) const {
  out << csv_header() << '\n';
  for (const auto& r : records_) out << csv_line(r) << '\n';
}

LossLog LossLog::read_csv(std::istream& in) {
  LossLog log;
  std::string line;
  if (!std::getline(in, line) || line != csv_header()) throw std::invalid_argument("loss log missing header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    LossRecord r;
    unsigned long long step = 0, epoch = 0;
    if (std::sscanf(line.c_str(), "%llu,%llu,%lf,%lf", &step, &epoch, &r.loss, &r.lr) != 4)
      throw std::invalid_argument("bad loss log line: " + line);
    r.step = step;
    r.epoch = epoch;
    log.append(r);
  }
  return log;
}

double convergence_rate(const LossLog& log, std::size_t window) {
  if (window < 2) throw std::invalid_argument("convergence_rate: window must be >= 2");
  if (window > log.size()) throw std::invalid_argument("convergence_rate: window exceeds log length");
  const auto& rs = log.records();
  const std::size_t first = rs.size() - window;
  double mx = 0.0, my = 0.0;
  for (std::size_t i = first; i < rs.size(); ++i) {
    mx += static_cast<double>(rs[i].step);
    my += rs[i].loss;
  }
  mx /= static_cast<double>(window);
  my /= static_cast<double>(window);
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = first; i < rs.size(); ++i) {
    const double dx = static_cast<double>(rs[i].step) - mx;
    sxy += dx * (rs[i].loss - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

double accumulate_gradients(const TransformerParams& params, const ModelConfig& config, const MiniBatch& batch,
                            TransformerParams& grad_acc, double weight) {
  Tape tape;
  const BoundParams bound = bind_params(tape, params, &grad_acc);
  const Var loss = sequence_loss(tape, bound, config, batch.src, batch.dec_in, batch.tgt);
  tape.backward(ag::scale(loss, weight));
  return loss.value()[0];
}

OptimizerState OptimizerState::for_params(const TransformerParams& params, const AdamConfig& cfg) {
  OptimizerState s;
  visit_params(params, [&](const std::string&, const Tensor& t) { s.slots.push_back(make_adam_state(t.shape(), cfg)); });
  return s;
}

void apply_adam(TransformerParams& params, const TransformerParams& grads, OptimizerState& opt, double lr) {
  std::vector<const Tensor*> g;
  visit_params(grads, [&](const std::string& name, const Tensor& t) {
    t.check_finite("gradient of " + name);
    g.push_back(&t);
  });
  std::size_t i = 0;
  visit_params(params, [&](const std::string&, Tensor& p) {
    adam_update(p, *g[i], opt.slots.at(i), lr);
    ++i;
  });
}

namespace {

void zero(TransformerParams& p) {
  visit_params(p, [](const std::string&, Tensor& t) { t.fill(0.0); });
}

ModelConfig model_for(const PreparedDataset& data, ModelConfig m) {
  m.vocab_size = data.vocab.size();
  m.max_len = std::max(m.max_len, data.max_len);
  m.validate();
  return m;
}

std::uint64_t init_seed(std::uint64_t seed) { return splitmix64(seed ^ 0x696e6974ULL); }

const Tensor& find_tensor(const CheckpointSection& s, const std::string& name) {
  for (const auto& t : s.tensors)
    if (t.name == name) return t.value;
  throw CheckpointError("training section has no tensor '" + name + "'");
}

}  // namespace

Trainer::Trainer(const PreparedDataset& data, TrainConfig config)
    : data_(data),
      config_(std::move(config)),
      sampler_(data.count(Source::movie), data.count(Source::therapy), config_.seed, config_.mix, config_.minibatch),
      movie_pool_(data.pool(Source::movie)),
      therapy_pool_(data.pool(Source::therapy)) {
  config_.validate();
  config_.model = model_for(data, config_.model);
  params_ = init_params(config_.model, init_seed(config_.seed));
  grad_acc_ = zeros_like(params_);
  opt_ = OptimizerState::for_params(params_, config_.adam);
}

Trainer::Trainer(const PreparedDataset& data, TrainConfig config, const Checkpoint& ckpt)
    : Trainer(data, std::move(config)) {
  const CheckpointSection* s = ckpt.find_section(kTrainSectionTag);
  if (!s) throw CheckpointError("checkpoint has no training state");
  if (nlohmann::json(ckpt.config) != nlohmann::json(config_.model))
    throw CheckpointError("checkpoint model config differs from the training config");
  if (ckpt.extra.contains("vocab") && ckpt.extra.at("vocab") != nlohmann::json(data.vocab))
    throw CheckpointError("checkpoint vocabulary differs from the dataset");
  const auto& meta = s->meta;
  if (meta.at("seed").get<std::uint64_t>() != config_.seed || meta.at("accumulation").get<std::size_t>() != config_.accumulation ||
      meta.at("minibatch").get<std::size_t>() != config_.minibatch)
    throw CheckpointError("checkpoint seed/accumulation/minibatch differ from the training config");

  updates_ = meta.at("updates").get<std::uint64_t>();
  minibatches_ = meta.at("minibatches").get<std::uint64_t>();
  epoch_batch_ = meta.at("epoch_batch").get<std::uint64_t>();
  accumulated_ = meta.at("accumulated").get<std::size_t>();
  sampler_.restore(meta.at("sampler"));

  std::size_t i = 0;
  visit_params(params_, [&](const std::string& name, Tensor& t) {
    auto load = [&](const std::string& key, Tensor& dst) {
      const Tensor& src = find_tensor(*s, key);
      if (src.shape() != dst.shape()) throw CheckpointError("shape mismatch for " + key);
      dst = src;
    };
    load("param." + name, t);
    load("m." + name, opt_.slots[i].m);
    load("v." + name, opt_.slots[i].v);
    opt_.slots[i].t = updates_;
    ++i;
  });
  i = 0;
  visit_params(grad_acc_, [&](const std::string& name, Tensor& t) {
    const Tensor& src = find_tensor(*s, "acc." + name);
    if (src.shape() != t.shape()) throw CheckpointError("shape mismatch for acc." + name);
    t = src;
  });
}

bool Trainer::finished() const {
  if (config_.max_updates > 0 && updates_ >= config_.max_updates) return true;
  return sampler_.epoch() >= config_.max_epochs;
}

std::optional<StepResult> Trainer::step() {
  if (finished()) return std::nullopt;
  auto refs = sampler_.next(epoch_batch_);
  if (!refs) throw TrainingError("sampler exhausted mid-epoch");

  std::vector<std::size_t> ids;
  ids.reserve(refs->size());
  for (const SampleRef& r : *refs) ids.push_back((r.source == Source::movie ? movie_pool_ : therapy_pool_)[r.index]);
  const MiniBatch mb = make_minibatch(data_, ids);

  StepResult res;
  res.record.step = minibatches_ + 1;
  res.record.epoch = sampler_.epoch() + 1;
  res.record.lr = lr_schedule(updates_ + 1, config_);
  try {
    res.record.loss =
        accumulate_gradients(params_, config_.model, mb, grad_acc_, 1.0 / static_cast<double>(config_.accumulation));
  } catch (const NumericError& e) {
    std::ostringstream msg;
    msg << "non-finite value at minibatch " << res.record.step << " (epoch " << res.record.epoch << ", update "
        << updates_ << ", records";
    for (std::size_t id : ids) msg << ' ' << id;
    msg << "): " << e.what();
    throw TrainingError(msg.str());
  }
  ++minibatches_;
  ++epoch_batch_;
  if (++accumulated_ == config_.accumulation) {
    apply_adam(params_, grad_acc_, opt_, res.record.lr);
    zero(grad_acc_);
    accumulated_ = 0;
    ++updates_;
    res.applied = true;
  }
  if (sampler_.remaining(Source::movie) + sampler_.remaining(Source::therapy) == 0) {
    sampler_.start_next_epoch();
    epoch_batch_ = 0;
    res.epoch_end = true;
  }
  log_.append(res.record);
  return res;
}

void Trainer::run(const std::function<bool(const StepResult&)>& on_step) {
  while (auto r = step()) {
    if (on_step && !on_step(*r)) break;
  }
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint ck = inference_checkpoint(params_, config_.model, data_.vocab);
  // Paths depend on where the run lives, not on its state.
  ck.extra["train"] = config_;
  ck.extra["train"].erase("dataset");
  ck.extra["train"].erase("out_dir");
  CheckpointSection s;
  std::copy_n(kTrainSectionTag, 4, s.tag.begin());
  s.meta = {{"seed", config_.seed},
            {"accumulation", config_.accumulation},
            {"minibatch", config_.minibatch},
            {"updates", updates_},
            {"minibatches", minibatches_},
            {"epoch_batch", epoch_batch_},
            {"accumulated", accumulated_},
            {"sampler", sampler_.state()}};
  std::size_t i = 0;
  visit_params(params_, [&](const std::string& name, const Tensor& t) {
    s.tensors.push_back({"param." + name, t});
    s.tensors.push_back({"m." + name, opt_.slots[i].m});
    s.tensors.push_back({"v." + name, opt_.slots[i].v});
    ++i;
  });
  visit_params(grad_acc_, [&](const std::string& name, const Tensor& t) { s.tensors.push_back({"acc." + name, t}); });
  ck.sections.push_back(std::move(s));
  return ck;
}

Checkpoint inference_checkpoint(const TransformerParams& params, const ModelConfig& config, const Vocab& vocab) {
  Checkpoint ck;
  ck.config = config;
  ck.extra["vocab"] = vocab;
  ck.params = params;
  return ck;
}

TrainRunResult run_training(const PreparedDataset& data, const TrainConfig& config,
                            const std::optional<std::filesystem::path>& resume, std::ostream* progress) {
  namespace fs = std::filesystem;
  const fs::path dir = config.out_dir;
  fs::create_directories(dir);
  const fs::path log_path = dir / "loss.csv";

  std::optional<Trainer> trainer;
  LossLog previous;
  if (resume) {
    trainer.emplace(data, config, load_checkpoint(*resume));
    std::ifstream old(log_path);
    if (old) previous = LossLog::read_csv(old);
    previous.truncate_after(trainer->minibatches());
  } else {
    trainer.emplace(data, config);
  }
  {
    std::ofstream out(log_path, std::ios::trunc);
    if (!out) throw TrainingError("cannot write " + log_path.string());
    previous.write_csv(out);
  }
  std::ofstream log_out(log_path, std::ios::app);

  auto save = [&](const std::string& name) {
    const fs::path p = dir / name;
    try {
      save_checkpoint(p, trainer->checkpoint());
    } catch (const std::exception& e) {
      throw TrainingError("checkpoint write failed for " + p.string() + ": " + e.what());
    }
    return p;
  };

  try {
    trainer->run([&](const StepResult& r) {
      log_out << LossLog::csv_line(r.record) << '\n';
      log_out.flush();
      if (r.applied && config.checkpoint_every > 0 && trainer->updates() % config.checkpoint_every == 0)
        save("step-" + std::to_string(trainer->updates()) + ".psyt");
      if (r.epoch_end && config.checkpoint_each_epoch) save("epoch-" + std::to_string(r.record.epoch) + ".psyt");
      if (progress && r.applied) {
        *progress << "update " << trainer->updates() << " epoch " << r.record.epoch << " loss " << r.record.loss
                  << " lr " << r.record.lr << '\n';
      }
      return true;
    });
  } catch (const TrainingError&) {
    try {
      save("diagnostic.psyt");
    } catch (const TrainingError&) {
    }
    throw;
  }
  TrainRunResult out;
  out.final_checkpoint = save("final.psyt");
  out.updates = trainer->updates();
  out.minibatches = trainer->minibatches();
  return out;
}

}  // namespace psyt
