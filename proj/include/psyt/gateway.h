#pragma once

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "psyt/dialogue.h"
#include "psyt/eval.h"

namespace httplib {
class Server;
}

namespace psyt {

// Carries the HTTP status a handler should answer with.
class GatewayError : public std::runtime_error {
 public:
  GatewayError(int status, const std::string& what) : std::runtime_error(what), status_(status) {}
  int status() const { return status_; }

 private:
  int status_;
};

// In-memory chat sessions with idle expiry.
class SessionStore {
 public:
  using Clock = std::function<std::chrono::steady_clock::time_point()>;
  using IdSource = std::function<std::string()>;

  SessionStore(std::shared_ptr<const ChatModel> model, std::chrono::seconds idle = std::chrono::minutes(30),
               Clock clock = std::chrono::steady_clock::now, IdSource ids = {});

  // Appends every turn as one JSON line {session_id, speaker, text, ts}.
  void set_transcript_log(const std::filesystem::path& path);

  struct Reply {
    std::string session_id;
    std::string reply;
  };
  // Creates the session when the id is absent or unknown. Throws
  // PromptRequired on blank text.
  Reply chat(const std::optional<std::string>& session_id, const std::string& text);

  std::size_t size();
  bool contains(const std::string& id);

 private:
  struct Entry {
    std::unique_ptr<ChatSession> session;
    std::mutex turn_lock;
    std::chrono::steady_clock::time_point last_used;
  };
  void expire(std::chrono::steady_clock::time_point now);

  std::shared_ptr<const ChatModel> model_;
  std::chrono::seconds idle_;
  Clock clock_;
  IdSource ids_;
  std::mutex lock_;
  std::map<std::string, std::shared_ptr<Entry>> sessions_;
  std::filesystem::path log_path_;
  std::mutex log_lock_;
};

struct SlotScore {
  int clarity = 1;
  int specificity = 1;
  std::optional<int> benefit;
  int turing = 1;
};

// Serves a blinded batch to evaluators and joins submitted scores with the
// hidden key. Every assignment and score is appended to a JSON-lines store
// before it takes effect; reopening the store replays it.
class EvalQueue {
 public:
  EvalQueue(BlindBatch batch, const std::filesystem::path& store);

  // Next unassigned pending item, now assigned to `evaluator`.
  std::optional<PresentedItem> next(const std::string& evaluator);

  // 404 unknown item, 422 invalid scores, 409 slot already scored or item
  // held by another evaluator.
  void score(const std::string& item_id, Slot slot, const SlotScore& s, const std::string& evaluator = "");

  // Fully scored items in presentation order.
  std::vector<CodedPair> coded();
  std::size_t size() const { return batch_.items.size(); }
  std::size_t scored();

 private:
  struct State {
    std::string evaluator;
    std::optional<SlotScore> a, b;
    std::string a_by, b_by;
  };
  void apply(const nlohmann::json& rec);
  void append(const nlohmann::json& rec);
  const PresentedItem& item(const std::string& id) const;

  BlindBatch batch_;
  std::map<std::string, std::size_t> index_;
  std::map<std::string, State> state_;
  std::filesystem::path store_;
  std::mutex lock_;
};

nlohmann::json client_view(const PresentedItem& item);

struct GatewayOptions {
  std::filesystem::path static_dir;  // mounted at / when set
};

// HTTP facade. Either dependency may be null: chat then answers 503, and
// the evaluation endpoints answer 503 without a batch.
class Gateway {
 public:
  Gateway(std::shared_ptr<SessionStore> sessions, std::shared_ptr<EvalQueue> queue, GatewayOptions opts = {});
  void install(httplib::Server& server);

 private:
  std::shared_ptr<SessionStore> sessions_;
  std::shared_ptr<EvalQueue> queue_;
  GatewayOptions opts_;
};

}  // namespace psyt
