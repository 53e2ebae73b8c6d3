#include "psyt/gateway.h"

#include <fcntl.h>
#include <unistd.h>

#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include <httplib.h>

namespace psyt {

namespace {

std::string random_session_id() {
  thread_local std::random_device rd;
  char buf[33];
  std::snprintf(buf, sizeof buf, "%08x%08x%08x%08x", rd(), rd(), rd(), rd());
  return buf;
}

// One write(2) per record on an O_APPEND descriptor, then fsync.
void append_line(const std::filesystem::path& path, const std::string& line) {
  const int fd = ::open(path.c_str(), O_WRONLY | O_APPEND | O_CREAT | O_CLOEXEC, 0644);
  if (fd < 0) throw std::runtime_error("cannot open " + path.string() + " for append");
  const std::string data = line + "\n";
  const ssize_t n = ::write(fd, data.data(), data.size());
  const int synced = ::fsync(fd);
  ::close(fd);
  if (n != static_cast<ssize_t>(data.size()) || synced != 0) throw std::runtime_error("append failed: " + path.string());
}

void check_score(int v, int hi, const char* field) {
  if (v < 1 || v > hi)
    throw GatewayError(422, std::string(field) + " must be in 1.." + std::to_string(hi) + ", got " + std::to_string(v));
}

nlohmann::json slot_json(const SlotScore& s) {
  return {{"clarity", s.clarity},
          {"specificity", s.specificity},
          {"benefit", s.benefit ? nlohmann::json(*s.benefit) : nlohmann::json(nullptr)},
          {"turing", s.turing}};
}

ResponseScores to_response(const SlotScore& s) { return {s.clarity, s.specificity, s.benefit, s.turing}; }

}  // namespace

// ---- chat sessions ----

SessionStore::SessionStore(std::shared_ptr<const ChatModel> model, std::chrono::seconds idle, Clock clock, IdSource ids)
    : model_(std::move(model)), idle_(idle), clock_(std::move(clock)), ids_(ids ? std::move(ids) : random_session_id) {
  if (!model_) throw std::invalid_argument("SessionStore needs a model");
}

void SessionStore::set_transcript_log(const std::filesystem::path& path) { log_path_ = path; }

void SessionStore::expire(std::chrono::steady_clock::time_point now) {
  for (auto it = sessions_.begin(); it != sessions_.end();) {
    if (now - it->second->last_used >= idle_)
      it = sessions_.erase(it);
    else
      ++it;
  }
}

SessionStore::Reply SessionStore::chat(const std::optional<std::string>& session_id, const std::string& text) {
  std::shared_ptr<Entry> entry;
  std::string id;
  {
    std::lock_guard<std::mutex> g(lock_);
    const auto now = clock_();
    expire(now);
    id = session_id && !session_id->empty() ? *session_id : ids_();
    auto& slot = sessions_[id];
    if (!slot) {
      slot = std::make_shared<Entry>();
      slot->session = std::make_unique<ChatSession>(id, model_);
    }
    slot->last_used = now;
    entry = slot;
  }
  std::lock_guard<std::mutex> turn(entry->turn_lock);
  Reply r{id, entry->session->respond(text)};
  if (!log_path_.empty()) {
    const auto& t = entry->session->transcript();
    std::lock_guard<std::mutex> g(log_lock_);
    for (std::size_t i = t.size() - 2; i < t.size(); ++i)
      append_line(log_path_, nlohmann::json{{"session_id", id}, {"speaker", t[i].speaker}, {"text", t[i].text},
                                            {"ts", t[i].ts}}
                                 .dump());
  }
  return r;
}

std::size_t SessionStore::size() {
  std::lock_guard<std::mutex> g(lock_);
  expire(clock_());
  return sessions_.size();
}

bool SessionStore::contains(const std::string& id) {
  std::lock_guard<std::mutex> g(lock_);
  expire(clock_());
  return sessions_.count(id) > 0;
}

// ---- evaluation queue ----

EvalQueue::EvalQueue(BlindBatch batch, const std::filesystem::path& store) : batch_(std::move(batch)), store_(store) {
  for (std::size_t i = 0; i < batch_.items.size(); ++i) {
    index_[batch_.items[i].id] = i;
    if (!batch_.human_slot.count(batch_.items[i].id))
      throw EvalError("batch key has no entry for item '" + batch_.items[i].id + "'");
  }
  const nlohmann::json header{{"op", "batch"}, {"seed", batch_.seed}, {"items", batch_.items.size()}};
  std::ifstream in(store_);
  if (!in) {
    append(header);
    return;
  }
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line))
    if (!line.empty()) lines.push_back(line);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(lines[i]);
    } catch (const nlohmann::json::exception&) {
      if (i + 1 == lines.size()) break;  // torn final write
      throw EvalError(store_.string() + ": corrupt record on line " + std::to_string(i + 1));
    }
    if (i == 0) {
      if (rec != header) throw EvalError(store_.string() + " belongs to a different evaluation batch");
      continue;
    }
    apply(rec);
  }
  if (lines.empty()) append(header);
}

const PresentedItem& EvalQueue::item(const std::string& id) const {
  const auto it = index_.find(id);
  if (it == index_.end()) throw GatewayError(404, "unknown item '" + id + "'");
  return batch_.items[it->second];
}

void EvalQueue::apply(const nlohmann::json& rec) {
  const std::string op = rec.at("op").get<std::string>();
  const std::string id = rec.at("item").get<std::string>();
  item(id);
  State& st = state_[id];
  if (op == "assign") {
    st.evaluator = rec.at("evaluator").get<std::string>();
  } else if (op == "score") {
    SlotScore s;
    s.clarity = rec.at("clarity").get<int>();
    s.specificity = rec.at("specificity").get<int>();
    if (!rec.at("benefit").is_null()) s.benefit = rec.at("benefit").get<int>();
    s.turing = rec.at("turing").get<int>();
    const std::string by = rec.value("evaluator", "");
    if (parse_slot(rec.at("slot").get<std::string>()) == Slot::A) {
      st.a = s;
      st.a_by = by;
    } else {
      st.b = s;
      st.b_by = by;
    }
  } else {
    throw EvalError("unknown store record '" + op + "'");
  }
}

void EvalQueue::append(const nlohmann::json& rec) { append_line(store_, rec.dump()); }

std::optional<PresentedItem> EvalQueue::next(const std::string& evaluator) {
  if (evaluator.empty()) throw GatewayError(400, "evaluator is required");
  std::lock_guard<std::mutex> g(lock_);
  for (const PresentedItem& it : batch_.items) {
    const auto st = state_.find(it.id);
    if (st != state_.end() && (!st->second.evaluator.empty() || st->second.a || st->second.b)) continue;
    const nlohmann::json rec{{"op", "assign"}, {"item", it.id}, {"evaluator", evaluator}};
    append(rec);
    apply(rec);
    return it;
  }
  return std::nullopt;
}

void EvalQueue::score(const std::string& item_id, Slot slot, const SlotScore& s, const std::string& evaluator) {
  std::lock_guard<std::mutex> g(lock_);
  const PresentedItem& it = item(item_id);
  State& st = state_[item_id];
  if (st.a && st.b) throw GatewayError(409, "item '" + item_id + "' is already scored");
  if (slot == Slot::A ? st.a.has_value() : st.b.has_value())
    throw GatewayError(409, "slot " + std::string(slot_name(slot)) + " of '" + item_id + "' is already scored");
  if (!evaluator.empty() && !st.evaluator.empty() && evaluator != st.evaluator)
    throw GatewayError(409, "item '" + item_id + "' is assigned to another evaluator");
  check_score(s.clarity, kRubricMax, "clarity");
  check_score(s.specificity, kRubricMax, "specificity");
  if (it.source == Source::therapy) {
    if (!s.benefit) throw GatewayError(422, "benefit is required for therapy prompts");
    check_score(*s.benefit, kRubricMax, "benefit");
  } else if (s.benefit) {
    throw GatewayError(422, "benefit must be omitted for movie prompts");
  }
  check_score(s.turing, kTuringMax, "turing");
  nlohmann::json rec = slot_json(s);
  rec["op"] = "score";
  rec["item"] = item_id;
  rec["slot"] = slot_name(slot);
  rec["evaluator"] = evaluator.empty() ? st.evaluator : evaluator;
  append(rec);
  apply(rec);
}

std::vector<CodedPair> EvalQueue::coded() {
  std::lock_guard<std::mutex> g(lock_);
  std::vector<CodedPair> out;
  for (const PresentedItem& it : batch_.items) {
    const auto found = state_.find(it.id);
    if (found == state_.end() || !found->second.a || !found->second.b) continue;
    const State& st = found->second;
    const Slot hs = batch_.human_slot.at(it.id);
    CodedPair p;
    p.id = it.id;
    p.source = it.source;
    p.prompt = it.prompt;
    p.human_response = hs == Slot::A ? it.a : it.b;
    p.model_response = hs == Slot::A ? it.b : it.a;
    p.human = to_response(hs == Slot::A ? *st.a : *st.b);
    p.model = to_response(hs == Slot::A ? *st.b : *st.a);
    p.evaluator = !st.evaluator.empty() ? st.evaluator : !st.a_by.empty() ? st.a_by : st.b_by;
    p.human_slot = hs;
    out.push_back(std::move(p));
  }
  return out;
}

std::size_t EvalQueue::scored() {
  std::lock_guard<std::mutex> g(lock_);
  std::size_t n = 0;
  for (const auto& [id, st] : state_) n += st.a && st.b;
  return n;
}

nlohmann::json client_view(const PresentedItem& item) {
  return {{"item_id", item.id}, {"source", source_name(item.source)}, {"prompt", item.prompt},
          {"slots", {{"A", item.a}, {"B", item.b}}}};
}

// ---- HTTP ----

namespace {

void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message) {
  send_json(res, status, {{"error", message}});
}

nlohmann::json parse_body(const httplib::Request& req) {
  try {
    auto j = nlohmann::json::parse(req.body);
    if (!j.is_object()) throw GatewayError(400, "request body must be a JSON object");
    return j;
  } catch (const nlohmann::json::exception&) {
    throw GatewayError(400, "request body is not valid JSON");
  }
}

int int_field(const nlohmann::json& body, const char* name) {
  const auto it = body.find(name);
  if (it == body.end() || it->is_null()) throw GatewayError(422, std::string(name) + " is required");
  if (!it->is_number_integer()) throw GatewayError(422, std::string(name) + " must be an integer");
  return it->get<int>();
}

std::optional<std::string> string_field(const nlohmann::json& body, const char* name) {
  const auto it = body.find(name);
  if (it == body.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) throw GatewayError(400, std::string(name) + " must be a string");
  return it->get<std::string>();
}

template <class F>
void guarded(httplib::Response& res, F&& fn) {
  try {
    fn();
  } catch (const GatewayError& e) {
    send_error(res, e.status(), e.what());
  } catch (const PromptRequired& e) {
    send_error(res, 400, e.what());
  } catch (const EvalError& e) {
    send_error(res, 422, e.what());
  } catch (const std::exception& e) {
    send_error(res, 500, e.what());
  }
}

}  // namespace

Gateway::Gateway(std::shared_ptr<SessionStore> sessions, std::shared_ptr<EvalQueue> queue, GatewayOptions opts)
    : sessions_(std::move(sessions)), queue_(std::move(queue)), opts_(std::move(opts)) {}

void Gateway::install(httplib::Server& server) {
  server.Post("/api/chat", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      if (!sessions_) throw GatewayError(503, "no model loaded");
      const auto body = parse_body(req);
      const auto text = string_field(body, "text");
      if (!text) throw GatewayError(400, "text is required");
      const auto r = sessions_->chat(string_field(body, "session_id"), *text);
      send_json(res, 200, {{"session_id", r.session_id}, {"reply", r.reply}});
    });
  });

  server.Get("/api/eval/next", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      if (!queue_) throw GatewayError(503, "no evaluation batch loaded");
      const auto item = queue_->next(req.get_param_value("evaluator"));
      if (!item) {
        res.status = 204;
        return;
      }
      send_json(res, 200, client_view(*item));
    });
  });

  server.Post("/api/eval/score", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      if (!queue_) throw GatewayError(503, "no evaluation batch loaded");
      const auto body = parse_body(req);
      const auto id = string_field(body, "item_id");
      if (!id) throw GatewayError(400, "item_id is required");
      const auto slot_text = string_field(body, "slot");
      if (!slot_text || (*slot_text != "A" && *slot_text != "B")) throw GatewayError(422, "slot must be A or B");
      SlotScore s;
      s.clarity = int_field(body, "clarity");
      s.specificity = int_field(body, "specificity");
      if (body.contains("benefit") && !body["benefit"].is_null()) s.benefit = int_field(body, "benefit");
      s.turing = int_field(body, "turing");
      queue_->score(*id, parse_slot(*slot_text), s, string_field(body, "evaluator").value_or(""));
      send_json(res, 200, {{"item_id", *id}, {"slot", *slot_text}, {"status", "accepted"}});
    });
  });

  server.Get("/api/report", [this](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] {
      if (!queue_) throw GatewayError(503, "no evaluation batch loaded");
      const auto coded = queue_->coded();
      if (coded.size() < 2) throw GatewayError(409, "the report needs at least 2 fully scored items");
      send_json(res, 200, aggregate(coded));
    });
  });

  server.Get("/api/eval/coded.csv", [this](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] {
      if (!queue_) throw GatewayError(503, "no evaluation batch loaded");
      std::ostringstream out;
      write_coded_csv(out, queue_->coded());
      res.status = 200;
      res.set_content(out.str(), "text/csv");
    });
  });

  server.Get("/api/health", [this](const httplib::Request&, httplib::Response& res) {
    nlohmann::json j{{"model_loaded", sessions_ != nullptr}, {"eval_loaded", queue_ != nullptr}};
    if (queue_) {
      j["items"] = queue_->size();
      j["scored"] = queue_->scored();
    }
    send_json(res, 200, j);
  });

  if (!opts_.static_dir.empty() && !server.set_mount_point("/", opts_.static_dir.string()))
    throw std::runtime_error("cannot serve static files from " + opts_.static_dir.string());
}

}  // namespace psyt
