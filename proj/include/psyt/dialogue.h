#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "psyt/tensor.h"
#include "psyt/transformer.h"
#include "psyt/vocab.h"

namespace psyt {

// Supplies next-token scores for greedy decoding. begin() is called once per
// prompt; next_scores() receives the decoder context so far ([pad, sos, ...]).
class NextTokenScorer {
 public:
  virtual ~NextTokenScorer() = default;
  virtual void begin(std::span<const TokenId> prompt) = 0;
  virtual std::vector<double> next_scores(std::span<const TokenId> context) = 0;
  // Longest context the scorer accepts.
  virtual std::size_t max_context() const = 0;
};

class TransformerScorer : public NextTokenScorer {
 public:
  TransformerScorer(const TransformerParams& params, const ModelConfig& config);
  void begin(std::span<const TokenId> prompt) override;
  std::vector<double> next_scores(std::span<const TokenId> context) override;
  std::size_t max_context() const override { return config_.max_len; }

 private:
  const TransformerParams& params_;
  ModelConfig config_;
  Tensor memory_;
  std::vector<std::size_t> key_lengths_;
  std::size_t src_len_ = 0;
};

// Lowest index among the maxima.
std::size_t argmax(std::span<const double> scores);

// Starts from [pad, sos] (the right-shifted form of a target beginning with
// sos), appends the argmax token until eos, max_out tokens, or the scorer's
// context limit. Returns the generated tokens without eos.
TokenSeq greedy_decode(NextTokenScorer& scorer, std::span<const TokenId> prompt, std::size_t max_out);
TokenSeq greedy_decode(const TransformerParams& params, const ModelConfig& config, std::span<const TokenId> prompt,
                       std::size_t max_out);

// Space-joined tokens with the space before . , ! ? ' ; : removed.
std::string detokenize(std::span<const std::string> tokens);

class PromptRequired : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// An immutable loaded model that any number of sessions may share.
struct ChatModel {
  ModelConfig config;
  TransformerParams params;
  Vocab vocab;
  std::size_t max_out = 0;  // defaults to config.max_len

  // Encode, decode greedily, detokenize. Throws PromptRequired on blank text.
  std::string reply(const std::string& user_text) const;
};

// Throws std::runtime_error naming the path when the file is missing or invalid.
ChatModel load_chat_model(const std::filesystem::path& path);

struct Turn {
  std::string speaker;  // "user" or "bot"
  std::string text;
  std::string ts;       // ISO-8601 UTC
};

void to_json(nlohmann::json& j, const Turn& t);
void from_json(const nlohmann::json& j, Turn& t);

std::string utc_timestamp();

class ChatSession {
 public:
  using Clock = std::function<std::string()>;

  ChatSession(std::string id, std::shared_ptr<const ChatModel> model, Clock clock = utc_timestamp);

  // Replies to user_text alone; earlier turns are never shown to the model.
  std::string respond(const std::string& user_text);

  const std::string& id() const { return id_; }
  const std::vector<Turn>& transcript() const { return transcript_; }
  nlohmann::json transcript_json() const;

 private:
  std::string id_;
  std::shared_ptr<const ChatModel> model_;
  Clock clock_;
  std::vector<Turn> transcript_;
};

// Line-oriented chat: each non-empty input line gets one "bot> " reply line.
// "/quit" or end of input ends the loop; the transcript is written to
// transcript_path when given. Returns the process exit code.
int chat_repl(std::shared_ptr<const ChatModel> model, std::istream& in, std::ostream& out,
              const std::filesystem::path& transcript_path = {});

}  // namespace psyt
