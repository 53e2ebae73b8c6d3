// psyt: command-line driver for data preparation, training, chat,
// evaluation packets, reports and the HTTP gateway.

#include <csignal>
#include <fstream>
#include <iostream>
#include <memory>

#include <CLI11.hpp>
#include <httplib.h>

#include "psyt/checkpoint.h"
#include "psyt/dataset.h"
#include "psyt/dialogue.h"
#include "psyt/eval.h"
#include "psyt/gateway.h"
#include "psyt/trainer.h"

namespace fs = std::filesystem;
using namespace psyt;

namespace {

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return nlohmann::json::parse(in);
}

// Relative paths inside a config file are taken relative to that file.
std::string resolve(const fs::path& base, const std::string& p) {
  if (p.empty() || fs::path(p).is_absolute()) return p;
  return (base / p).lexically_normal().string();
}

struct PrepareArgs {
  std::string config, movie, therapy, greetings, out;
  std::optional<std::size_t> vocab_cap, max_len;
  std::optional<double> sigma;
  std::optional<std::uint64_t> seed;
};

int cmd_prepare(const PrepareArgs& a) {
  PrepareConfig cfg;
  if (!a.config.empty()) {
    cfg = read_json(a.config).get<PrepareConfig>();
    const fs::path base = fs::path(a.config).parent_path();
    cfg.movie_path = resolve(base, cfg.movie_path);
    cfg.therapy_path = resolve(base, cfg.therapy_path);
    cfg.greetings_path = resolve(base, cfg.greetings_path);
  }
  if (!a.movie.empty()) cfg.movie_path = a.movie;
  if (!a.therapy.empty()) cfg.therapy_path = a.therapy;
  if (!a.greetings.empty()) cfg.greetings_path = a.greetings;
  if (a.vocab_cap) cfg.vocab_cap = *a.vocab_cap;
  if (a.max_len) cfg.max_len_ceiling = *a.max_len;
  if (a.sigma) cfg.sigma = *a.sigma;
  if (a.seed) cfg.seed = *a.seed;
  if (cfg.movie_path.empty()) throw CLI::ValidationError("--movie", "a movie corpus is required");

  PrepareStats st;
  const PreparedDataset ds = prepare_dataset(cfg, &st);
  save_prepared(a.out, ds);
  std::cout << "movie pairs " << st.movie_pairs << " (malformed lines " << st.movie.malformed << ")\n"
            << "therapy pairs " << st.therapy_pairs << " (nicety-only dropped " << st.therapy.nicety_dropped << ")\n"
            << "kept after rarity filter " << st.kept_pairs << "\n"
            << "vocab " << ds.vocab.size() << ", max_len " << ds.max_len << "\n"
            << "wrote " << a.out << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& resume) {
  TrainConfig cfg = read_json(config_path).get<TrainConfig>();
  const fs::path base = fs::path(config_path).parent_path();
  cfg.dataset = resolve(base, cfg.dataset);
  cfg.out_dir = resolve(base, cfg.out_dir);
  if (cfg.dataset.empty()) throw std::runtime_error(config_path + ": \"dataset\" is required");
  const PreparedDataset ds = load_prepared(cfg.dataset);
  std::optional<fs::path> from;
  if (!resume.empty()) from = resume;
  const auto r = run_training(ds, cfg, from, &std::cout);
  std::cout << "updates " << r.updates << ", minibatches " << r.minibatches << "\nfinal checkpoint "
            << r.final_checkpoint.string() << "\n";
  return 0;
}

int cmd_chat(const std::string& model_path, const std::string& transcript, std::optional<std::size_t> max_out) {
  auto model = std::make_shared<ChatModel>(load_chat_model(model_path));
  if (max_out) model->max_out = *max_out;
  return chat_repl(model, std::cin, std::cout, transcript);
}

int cmd_export_model(const std::string& in, const std::string& out) {
  const ChatModel m = load_chat_model(in);
  save_checkpoint(out, inference_checkpoint(m.params, m.config, m.vocab));
  std::cout << "wrote " << out << "\n";
  return 0;
}

int cmd_eval_export(const std::string& pairs_path, std::uint64_t seed, const std::string& out_dir,
                    const std::string& model_path) {
  auto pairs = read_eval_pairs(pairs_path);
  std::unique_ptr<ChatModel> model;
  if (!model_path.empty()) model = std::make_unique<ChatModel>(load_chat_model(model_path));
  for (EvalPair& p : pairs) {
    if (!p.model_response.empty()) continue;
    if (!model) throw std::runtime_error("pair '" + p.id + "' has no model_response; pass --model to generate one");
    p.model_response = model->reply(p.prompt);
  }
  const BlindBatch batch = blind_shuffle(pairs, seed);
  save_blind_batch(out_dir, batch);
  std::cout << "wrote " << batch.items.size() << " blinded items to " << out_dir << "\n";
  return 0;
}

int cmd_report(const std::string& coded_path, const std::string& out, const std::string& fmt) {
  const auto coded = read_coded_csv(fs::path(coded_path));
  const EvalReport r = aggregate(coded);
  if (!out.empty()) export_report(r, parse_report_format(fmt), out);
  std::cout << format_headlines(r);
  return 0;
}

httplib::Server* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

struct ServeArgs {
  std::string model, eval_batch, store, static_dir, transcript_log, host = "127.0.0.1";
  int port = 8080;
  int idle_minutes = 30;
};

int cmd_serve(const ServeArgs& a) {
  std::shared_ptr<SessionStore> sessions;
  if (!a.model.empty()) {
    auto model = std::make_shared<ChatModel>(load_chat_model(a.model));
    sessions = std::make_shared<SessionStore>(model, std::chrono::minutes(a.idle_minutes));
    if (!a.transcript_log.empty()) sessions->set_transcript_log(a.transcript_log);
  }
  std::shared_ptr<EvalQueue> queue;
  if (!a.eval_batch.empty()) {
    const fs::path store = a.store.empty() ? fs::path(a.eval_batch) / "scores.jsonl" : fs::path(a.store);
    queue = std::make_shared<EvalQueue>(load_blind_batch(a.eval_batch), store);
  }
  Gateway gw(sessions, queue, GatewayOptions{a.static_dir});
  httplib::Server server;
  gw.install(server);
  g_server = &server;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::cout << "listening on http://" << a.host << ":" << a.port << (sessions ? "" : " (no model)")
            << (queue ? "" : " (no evaluation batch)") << std::endl;
  if (!server.listen(a.host, a.port)) {
    std::cerr << "psyt serve: cannot listen on " << a.host << ":" << a.port << "\n";
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"psyt: seq2seq dialogue model toolkit"};
  app.require_subcommand(1);

  PrepareArgs prep;
  auto* prepare = app.add_subcommand("prepare", "Build a prepared dataset from raw corpora");
  prepare->add_option("--config", prep.config, "PrepareConfig JSON file");
  prepare->add_option("--movie", prep.movie, "Cornell movie_lines.txt or a prompt<TAB>response file");
  prepare->add_option("--therapy", prep.therapy, "Therapy CSV with question_text and answer_text");
  prepare->add_option("--greetings", prep.greetings, "Greeting lexicon, one pattern per line");
  prepare->add_option("--vocab-cap", prep.vocab_cap, "Non-reserved vocabulary size cap");
  prepare->add_option("--max-len", prep.max_len, "Ceiling on the padded sequence length");
  prepare->add_option("--sigma", prep.sigma, "Rarity cut-off in standard deviations");
  prepare->add_option("--seed", prep.seed, "Seed recorded in the dataset");
  prepare->add_option("--out", prep.out, "Output file")->required();

  std::string train_config, train_resume;
  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--config", train_config, "TrainConfig JSON file")->required()->check(CLI::ExistingFile);
  train->add_option("--resume", train_resume, "Training checkpoint to resume from")->check(CLI::ExistingFile);

  std::string chat_model, chat_transcript;
  std::optional<std::size_t> chat_max_out;
  auto* chat = app.add_subcommand("chat", "Interactive chat on stdin/stdout");
  chat->add_option("--model", chat_model, "Checkpoint")->required();
  chat->add_option("--transcript", chat_transcript, "Write the transcript JSON here on exit");
  chat->add_option("--max-out", chat_max_out, "Reply token limit");

  std::string xm_in, xm_out;
  auto* export_model = app.add_subcommand("export-model", "Strip a training checkpoint down to inference weights");
  export_model->add_option("--checkpoint", xm_in, "Training or inference checkpoint")
      ->required()
      ->check(CLI::ExistingFile);
  export_model->add_option("--out", xm_out, "Output checkpoint")->required();

  auto* eval = app.add_subcommand("eval", "Evaluation packets");
  eval->require_subcommand(1);
  std::string ex_pairs, ex_out, ex_model;
  std::uint64_t ex_seed = 0;
  auto* ex = eval->add_subcommand("export", "Write a blinded batch (presentation.json + key.json)");
  ex->add_option("--pairs", ex_pairs, "CSV: id,source,prompt,human_response[,model_response]")
      ->required()
      ->check(CLI::ExistingFile);
  ex->add_option("--seed", ex_seed, "Shuffle seed")->required();
  ex->add_option("--out", ex_out, "Batch directory")->required();
  ex->add_option("--model", ex_model, "Checkpoint used to fill empty model responses");

  std::string rep_coded, rep_out, rep_fmt = "json";
  auto* report = app.add_subcommand("report", "Aggregate coded pairs");
  report->add_option("--coded", rep_coded, "Coded-pair CSV")->required()->check(CLI::ExistingFile);
  report->add_option("--out", rep_out, "Report file");
  report->add_option("--fmt", rep_fmt, "json or csv")->check(CLI::IsMember({"json", "csv"}));

  ServeArgs sv;
  auto* serve = app.add_subcommand("serve", "HTTP gateway for chat and blinded scoring");
  serve->add_option("--model", sv.model, "Checkpoint");
  serve->add_option("--eval-batch", sv.eval_batch, "Batch directory from `eval export`");
  serve->add_option("--store", sv.store, "Score store (default <eval-batch>/scores.jsonl)");
  serve->add_option("--static", sv.static_dir, "Directory served at /");
  serve->add_option("--transcript-log", sv.transcript_log, "Append chat turns as JSON lines");
  serve->add_option("--host", sv.host, "Bind address");
  serve->add_option("--port", sv.port, "Port");
  serve->add_option("--session-idle-minutes", sv.idle_minutes, "Chat session idle expiry");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*prepare) return cmd_prepare(prep);
    if (*train) return cmd_train(train_config, train_resume);
    if (*chat) return cmd_chat(chat_model, chat_transcript, chat_max_out);
    if (*export_model) return cmd_export_model(xm_in, xm_out);
    if (*ex) return cmd_eval_export(ex_pairs, ex_seed, ex_out, ex_model);
    if (*report) return cmd_report(rep_coded, rep_out, rep_fmt);
    if (*serve) return cmd_serve(sv);
  } catch (const CLI::Error& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "psyt: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
