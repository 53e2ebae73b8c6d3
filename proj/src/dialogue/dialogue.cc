#include "psyt/dialogue.h"

#include <chrono>
#include <ctime>
#include <fstream>
#include <istream>
#include <ostream>

#include "psyt/checkpoint.h"
#include "psyt/text.h"

namespace psyt {

TransformerScorer::TransformerScorer(const TransformerParams& params, const ModelConfig& config)
    : params_(params), config_(config) {}

void TransformerScorer::begin(std::span<const TokenId> prompt) {
  const std::size_t len = std::max<std::size_t>(content_length(prompt), 1);
  TokenBatch src;
  src.batch = 1;
  src.len = len;
  src.ids.assign(prompt.begin(), prompt.begin() + static_cast<std::ptrdiff_t>(len));
  Tape tape(false);
  const BoundParams bp = bind_params(tape, params_, nullptr);
  const Encoded enc = encoder_forward(tape, bp, config_, src);
  memory_ = enc.memory.value();
  key_lengths_ = enc.key_lengths;
  src_len_ = enc.len;
}

std::vector<double> TransformerScorer::next_scores(std::span<const TokenId> context) {
  TokenBatch dec;
  dec.batch = 1;
  dec.len = context.size();
  dec.ids.assign(context.begin(), context.end());
  Tape tape(false);
  const BoundParams bp = bind_params(tape, params_, nullptr);
  const Encoded enc{tape.constant(memory_), key_lengths_, src_len_};
  const Tensor logits = decoder_forward(tape, bp, config_, dec, enc).value();
  const auto last = logits.row(context.size() - 1);
  return {last.begin(), last.end()};
}

std::size_t argmax(std::span<const double> scores) {
  if (scores.empty()) throw std::invalid_argument("argmax of an empty score list");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[best]) best = i;
  return best;
}

TokenSeq greedy_decode(NextTokenScorer& scorer, std::span<const TokenId> prompt, std::size_t max_out) {
  if (max_out < 1) throw std::invalid_argument("greedy_decode: max_out must be >= 1");
  scorer.begin(prompt);
  TokenSeq context{kPadId, kSosId};
  TokenSeq out;
  while (out.size() < max_out && context.size() <= scorer.max_context()) {
    const auto next = static_cast<TokenId>(argmax(scorer.next_scores(context)));
    if (next == kEosId) break;
    out.push_back(next);
    context.push_back(next);
  }
  return out;
}

TokenSeq greedy_decode(const TransformerParams& params, const ModelConfig& config, std::span<const TokenId> prompt,
                       std::size_t max_out) {
  TransformerScorer scorer(params, config);
  return greedy_decode(scorer, prompt, max_out);
}

std::string detokenize(std::span<const std::string> tokens) {
  std::string out;
  for (const std::string& t : tokens) {
    const bool attach = t.size() == 1 && std::string_view(".,!?';:").find(t[0]) != std::string_view::npos;
    if (!out.empty() && !attach) out += ' ';
    out += t;
  }
  return out;
}

std::string ChatModel::reply(const std::string& user_text) const {
  if (trim(user_text).empty()) throw PromptRequired("a non-empty prompt is required");
  const TokenSeq prompt = encode_utterance(user_text, vocab, config.max_len);
  const TokenSeq ids = greedy_decode(params, config, prompt, max_out ? max_out : config.max_len);
  return detokenize(decode(ids, vocab));
}

ChatModel load_chat_model(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw std::runtime_error("checkpoint not found: " + path.string());
  Checkpoint ck;
  try {
    ck = load_checkpoint(path);
  } catch (const std::exception& e) {
    throw std::runtime_error("cannot load checkpoint " + path.string() + ": " + e.what());
  }
  if (!ck.extra.contains("vocab")) throw std::runtime_error("checkpoint " + path.string() + " has no vocabulary");
  ChatModel m;
  m.config = ck.config;
  m.params = std::move(ck.params);
  m.vocab = ck.extra.at("vocab").get<Vocab>();
  if (m.vocab.size() != m.config.vocab_size)
    throw std::runtime_error("checkpoint " + path.string() + " vocabulary size does not match the model");
  m.max_out = m.config.max_len;
  return m;
}

void to_json(nlohmann::json& j, const Turn& t) { j = {{"speaker", t.speaker}, {"text", t.text}, {"ts", t.ts}}; }

void from_json(const nlohmann::json& j, Turn& t) {
  t.speaker = j.at("speaker").get<std::string>();
  t.text = j.at("text").get<std::string>();
  t.ts = j.at("ts").get<std::string>();
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t secs = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

ChatSession::ChatSession(std::string id, std::shared_ptr<const ChatModel> model, Clock clock)
    : id_(std::move(id)), model_(std::move(model)), clock_(std::move(clock)) {
  if (!model_) throw std::invalid_argument("chat session needs a model");
}

std::string ChatSession::respond(const std::string& user_text) {
  std::string reply = model_->reply(user_text);
  transcript_.push_back({"user", user_text, clock_()});
  transcript_.push_back({"bot", reply, clock_()});
  return reply;
}

nlohmann::json ChatSession::transcript_json() const { return transcript_; }

int chat_repl(std::shared_ptr<const ChatModel> model, std::istream& in, std::ostream& out,
              const std::filesystem::path& transcript_path) {
  ChatSession session("repl", std::move(model));
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string text = trim(line);
    if (text == "/quit") break;
    if (text.empty()) continue;
    out << "bot> " << session.respond(text) << '\n' << std::flush;
  }
  if (!transcript_path.empty()) {
    std::ofstream f(transcript_path);
    if (!f) throw std::runtime_error("cannot write transcript " + transcript_path.string());
    f << session.transcript_json().dump(2) << '\n';
  }
  return 0;
}

}  // namespace psyt
