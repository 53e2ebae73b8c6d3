#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include <httplib.h>

#include "doctest.h"
#include "psyt/gateway.h"
#include "psyt/trainer.h"
#include "test_util.h"

using namespace psyt;
using nlohmann::json;

namespace {

std::shared_ptr<const ChatModel> small_model(std::uint64_t seed) {
  auto m = std::make_shared<ChatModel>();
  std::vector<std::string> tokens = kReservedTokens;
  for (const char* w : {"i", "feel", "sad", "happy", "you", "are", "ok", ".", "?", "!", "today"}) tokens.push_back(w);
  m->vocab = Vocab(tokens);
  m->config.n_encoder_blocks = 1;
  m->config.n_decoder_blocks = 1;
  m->config.n_heads = 2;
  m->config.d_model = 8;
  m->config.d_ff_attention = 8;
  m->config.d_ff_network = 8;
  m->config.vocab_size = m->vocab.size();
  m->config.max_len = 10;
  m->params = init_params(m->config, seed);
  m->max_out = 8;
  return m;
}

// Gateway on an ephemeral localhost port for the lifetime of the object.
struct TestServer {
  httplib::Server server;
  std::thread thread;
  int port = 0;

  explicit TestServer(Gateway& gw) {
    gw.install(server);
    port = server.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  ~TestServer() {
    server.stop();
    thread.join();
  }
  httplib::Client client() const { return httplib::Client("127.0.0.1", port); }
};

httplib::Result post(httplib::Client& c, const std::string& path, const json& body) {
  return c.Post(path, body.dump(), "application/json");
}

// Keys that would reveal which response is human-written.
void check_blind(const json& j) {
  static const std::set<std::string> banned{"origin", "origins", "human_slot", "human", "model",
                                            "human_response", "model_response", "is_human", "generated"};
  if (j.is_object()) {
    for (const auto& [k, v] : j.items()) {
      CHECK_MESSAGE(!banned.count(k), "payload exposes key " << k);
      check_blind(v);
    }
  } else if (j.is_array()) {
    for (const auto& v : j) check_blind(v);
  }
}

BlindBatch fixture_batch(std::uint64_t seed = 7) {
  const auto pairs = read_eval_pairs(psyt::testing::fixture_dir() / "eval" / "pairs.csv");
  return blind_shuffle(pairs, seed);
}

BlindBatch first_items(BlindBatch b, std::size_t n) {
  b.items.resize(n);
  std::map<std::string, Slot> key;
  for (const auto& it : b.items) key[it.id] = b.human_slot.at(it.id);
  b.human_slot = key;
  return b;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

json score_body(const std::string& id, const std::string& slot, const ResponseScores& s, const std::string& ev) {
  json j{{"item_id", id}, {"slot", slot}, {"clarity", s.clarity}, {"specificity", s.specificity},
         {"turing", s.turing}, {"evaluator", ev}};
  if (s.benefit) j["benefit"] = *s.benefit;
  return j;
}

}  // namespace

TEST_CASE("chat endpoint") {
  auto sessions = std::make_shared<SessionStore>(small_model(3));
  Gateway gw(sessions, nullptr);
  TestServer ts(gw);
  auto c = ts.client();

  auto r1 = post(c, "/api/chat", {{"text", "i feel sad"}});
  REQUIRE(r1);
  CHECK(r1->status == 200);
  const json j1 = json::parse(r1->body);
  const std::string sid = j1.at("session_id");
  CHECK(!sid.empty());
  CHECK(j1.at("reply") == small_model(3)->reply("i feel sad"));

  auto r2 = post(c, "/api/chat", {{"session_id", sid}, {"text", "i feel sad"}});
  CHECK(json::parse(r2->body).at("reply") == j1.at("reply"));
  CHECK(json::parse(r2->body).at("session_id") == sid);
  auto other = post(c, "/api/chat", {{"text", "you are ok ?"}});
  CHECK(json::parse(other->body).at("session_id") != sid);
  CHECK(sessions->size() == 2);

  CHECK(post(c, "/api/chat", {{"session_id", sid}, {"text", "   "}})->status == 400);
  CHECK(post(c, "/api/chat", {{"session_id", sid}})->status == 400);
  CHECK(c.Post("/api/chat", "{not json", "application/json")->status == 400);

  Gateway no_model(nullptr, nullptr);
  TestServer ts2(no_model);
  auto c2 = ts2.client();
  CHECK(post(c2, "/api/chat", {{"text", "hello"}})->status == 503);
  CHECK(c2.Get("/api/eval/next?evaluator=e1")->status == 503);
}

TEST_CASE("chat golden replies from the fixture checkpoint") {
  auto model = std::make_shared<ChatModel>(load_chat_model(psyt::testing::fixture_dir() / "chat_model.psyt"));
  Gateway gw(std::make_shared<SessionStore>(model), nullptr);
  TestServer ts(gw);
  auto c = ts.client();
  std::ifstream in(psyt::testing::golden_dir() / "chat_replies.json");
  REQUIRE(in);
  const json golden = json::parse(in);
  REQUIRE(golden.size() == 3);
  std::string sid;
  for (const auto& g : golden) {
    json body{{"text", g.at("prompt")}};
    if (!sid.empty()) body["session_id"] = sid;
    auto r = post(c, "/api/chat", body);
    REQUIRE(r);
    const json j = json::parse(r->body);
    sid = j.at("session_id");
    CHECK(j.at("reply") == g.at("reply"));
  }
}

TEST_CASE("sessions expire when idle and log transcripts") {
  auto now = std::chrono::steady_clock::time_point{};
  int next_id = 0;
  SessionStore store(small_model(1), std::chrono::minutes(30), [&] { return now; },
                     [&] { return "s" + std::to_string(next_id++); });
  const auto dir = psyt::testing::scratch_dir("sessions");
  store.set_transcript_log(dir / "log.jsonl");

  const auto a = store.chat(std::nullopt, "i feel sad");
  CHECK(a.session_id == "s0");
  now += std::chrono::minutes(29);
  store.chat(std::string("s0"), "happy today");
  now += std::chrono::minutes(29);
  CHECK(store.contains("s0"));
  now += std::chrono::minutes(1);
  CHECK(!store.contains("s0"));
  CHECK(store.chat(std::string("custom"), "ok").session_id == "custom");
  CHECK(store.size() == 1);
  CHECK_THROWS_AS(store.chat(std::nullopt, ""), PromptRequired);

  std::ifstream log(dir / "log.jsonl");
  std::vector<json> lines;
  for (std::string l; std::getline(log, l);) lines.push_back(json::parse(l));
  REQUIRE(lines.size() == 6);
  CHECK(lines[0].at("speaker") == "user");
  CHECK(lines[1].at("speaker") == "bot");
  CHECK(lines[2].at("text") == "happy today");
  CHECK(lines[4].at("session_id") == "custom");
}

TEST_CASE("concurrent chats match sequential replies") {
  auto model = small_model(8);
  auto sessions = std::make_shared<SessionStore>(model);
  Gateway gw(sessions, nullptr);
  TestServer ts(gw);
  const std::vector<std::string> prompts{"i feel sad", "you are ok ?", "happy today !", "are you sad ?"};
  std::vector<std::string> got(prompts.size());
  std::vector<std::thread> threads;
  for (std::size_t i = 0; i < prompts.size(); ++i)
    threads.emplace_back([&, i] {
      auto c = ts.client();
      for (int k = 0; k < 3; ++k) {
        auto r = c.Post("/api/chat", json{{"session_id", "t" + std::to_string(i)}, {"text", prompts[i]}}.dump(),
                        "application/json");
        if (r && r->status == 200) got[i] = json::parse(r->body).at("reply");
      }
    });
  for (auto& t : threads) t.join();
  for (std::size_t i = 0; i < prompts.size(); ++i) CHECK(got[i] == model->reply(prompts[i]));
}

TEST_CASE("eval queue hands out items and stays blind") {
  const auto dir = psyt::testing::scratch_dir("queue");
  auto queue = std::make_shared<EvalQueue>(first_items(fixture_batch(), 3), dir / "store.jsonl");
  Gateway gw(nullptr, queue);
  TestServer ts(gw);
  auto c = ts.client();

  std::set<std::string> ids;
  for (int i = 0; i < 3; ++i) {
    auto r = c.Get("/api/eval/next?evaluator=e1");
    REQUIRE(r);
    REQUIRE(r->status == 200);
    const json j = json::parse(r->body);
    check_blind(j);
    ids.insert(j.at("item_id").get<std::string>());
    CHECK(j.at("slots").size() == 2);
  }
  CHECK(ids.size() == 3);
  CHECK(c.Get("/api/eval/next?evaluator=e1")->status == 204);
  CHECK(c.Get("/api/eval/next")->status == 400);

  // Two evaluators receive disjoint items.
  auto q2 = std::make_shared<EvalQueue>(fixture_batch(), dir / "store2.jsonl");
  std::set<std::string> e1, e2;
  for (int round = 0; round < 4; ++round) {
    if (auto it = q2->next("e1")) e1.insert(it->id);
    if (auto it = q2->next("e2")) e2.insert(it->id);
  }
  std::vector<std::string> both;
  std::set_intersection(e1.begin(), e1.end(), e2.begin(), e2.end(), std::back_inserter(both));
  CHECK(both.empty());
  CHECK(e1.size() + e2.size() == 6);
  CHECK(e1.size() == 3);
}

TEST_CASE("score validation and idempotence") {
  const auto dir = psyt::testing::scratch_dir("score");
  const BlindBatch batch = fixture_batch();
  auto queue = std::make_shared<EvalQueue>(batch, dir / "store.jsonl");
  Gateway gw(nullptr, queue);
  TestServer ts(gw);
  auto c = ts.client();

  const auto therapy = std::find_if(batch.items.begin(), batch.items.end(),
                                    [](const PresentedItem& i) { return i.source == Source::therapy; });
  const auto movie = std::find_if(batch.items.begin(), batch.items.end(),
                                  [](const PresentedItem& i) { return i.source == Source::movie; });
  const std::string t = therapy->id, m = movie->id;

  auto status = [&](const json& body) { return post(c, "/api/eval/score", body)->status; };
  CHECK(status(score_body(t, "A", {5, 1, 1, 1}, "e1")) == 422);
  CHECK(status(score_body(t, "A", {1, 0, 1, 1}, "e1")) == 422);
  CHECK(status(score_body(t, "A", {1, 1, 1, 4}, "e1")) == 422);
  CHECK(status(score_body(t, "A", {1, 1, std::nullopt, 1}, "e1")) == 422);
  CHECK(status(score_body(m, "A", {1, 1, 2, 1}, "e1")) == 422);
  CHECK(status(score_body(t, "C", {1, 1, 1, 1}, "e1")) == 422);
  CHECK(status(score_body("nope", "A", {1, 1, 1, 1}, "e1")) == 404);
  CHECK(status({{"item_id", t}, {"slot", "A"}, {"clarity", "2"}, {"specificity", 1}, {"turing", 1}}) == 422);
  CHECK(queue->scored() == 0);

  auto r = post(c, "/api/eval/score", score_body(t, "A", {2, 3, 4, 1}, "e1"));
  CHECK(r->status == 200);
  check_blind(json::parse(r->body));
  CHECK(status(score_body(t, "B", {2, 3, 4, 2}, "e1")) == 200);
  CHECK(queue->scored() == 1);

  const std::string before = slurp(dir / "store.jsonl");
  CHECK(status(score_body(t, "B", {2, 3, 4, 2}, "e1")) == 409);
  CHECK(status(score_body(t, "A", {2, 3, 4, 1}, "e1")) == 409);
  CHECK(slurp(dir / "store.jsonl") == before);

  // A scored item never comes back through /next.
  for (int i = 0; i < 10; ++i) {
    auto n = c.Get("/api/eval/next?evaluator=e9");
    if (n->status == 204) break;
    CHECK(json::parse(n->body).at("item_id") != t);
  }

  // Report needs two scored items.
  CHECK(c.Get("/api/report")->status == 409);
}

TEST_CASE("full fixture queue reproduces the golden join") {
  const auto dir = psyt::testing::scratch_dir("join");
  const BlindBatch batch = fixture_batch();
  const auto golden_path = psyt::testing::fixture_dir() / "eval" / "coded.csv";
  const auto golden = read_coded_csv(golden_path);
  std::map<std::string, CodedPair> by_id;
  for (const auto& p : golden) by_id[p.id] = p;

  {
    auto queue = std::make_shared<EvalQueue>(batch, dir / "store.jsonl");
    Gateway gw(nullptr, queue);
    TestServer ts(gw);
    auto c = ts.client();
    // Score through the blinded view: the scorer only learns which slot is
    // which from the test's own copy of the key.
    bool first = true;
    for (const auto& item : batch.items) {
      const CodedPair& g = by_id.at(item.id);
      const bool human_a = batch.human_slot.at(item.id) == Slot::A;
      CHECK(post(c, "/api/eval/score", score_body(item.id, "A", human_a ? g.human : g.model, g.evaluator))->status ==
            200);
      if (first) {
        // Half-scored item survives a restart below.
        first = false;
        continue;
      }
      CHECK(post(c, "/api/eval/score", score_body(item.id, "B", human_a ? g.model : g.human, g.evaluator))->status ==
            200);
    }
    CHECK(queue->scored() == 5);
  }

  // Restart from the store, finish the first item.
  auto queue = std::make_shared<EvalQueue>(batch, dir / "store.jsonl");
  CHECK(queue->scored() == 5);
  {
    const auto& item = batch.items.front();
    const CodedPair& g = by_id.at(item.id);
    const bool human_a = batch.human_slot.at(item.id) == Slot::A;
    queue->score(item.id, Slot::B, {human_a ? g.model.clarity : g.human.clarity,
                                    human_a ? g.model.specificity : g.human.specificity,
                                    human_a ? g.model.benefit : g.human.benefit,
                                    human_a ? g.model.turing : g.human.turing},
                 g.evaluator);
  }
  Gateway gw(nullptr, queue);
  TestServer ts(gw);
  auto c = ts.client();
  auto csv = c.Get("/api/eval/coded.csv");
  REQUIRE(csv->status == 200);
  std::istringstream in(csv->body);
  auto exported = read_coded_csv(in);
  REQUIRE(exported.size() == 6);
  // Exported in presentation order; reorder to the golden file's order.
  std::vector<CodedPair> reordered;
  for (const auto& g : golden)
    for (const auto& e : exported)
      if (e.id == g.id) reordered.push_back(e);
  std::ostringstream out;
  write_coded_csv(out, reordered);
  CHECK(out.str() == slurp(golden_path));

  auto report = c.Get("/api/report");
  REQUIRE(report->status == 200);
  CHECK(json::parse(report->body).get<EvalReport>() == aggregate(golden));

  // A store is bound to its batch.
  CHECK_THROWS_AS(EvalQueue(fixture_batch(8), dir / "store.jsonl"), EvalError);
}

TEST_CASE("static files") {
  const auto dir = psyt::testing::scratch_dir("static");
  std::ofstream(dir / "index.html") << "<html>console</html>";
  Gateway gw(nullptr, nullptr, GatewayOptions{dir});
  TestServer ts(gw);
  auto c = ts.client();
  auto r = c.Get("/");
  REQUIRE(r);
  CHECK(r->status == 200);
  CHECK(r->body == "<html>console</html>");
  CHECK(json::parse(c.Get("/api/health")->body).at("model_loaded") == false);
}
