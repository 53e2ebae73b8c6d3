#include <algorithm>
#include <charconv>
#include <fstream>
#include <set>

#include "psyt/csv.h"
#include "psyt/eval.h"
#include "psyt/random.h"

namespace psyt {

namespace {

void check_range(int v, int hi, const std::string& field) {
  if (v < 1 || v > hi)
    throw EvalError(field + " must be in 1.." + std::to_string(hi) + ", got " + std::to_string(v));
}

void check_scores(const ResponseScores& s, Source source, const std::string& prefix) {
  check_range(s.clarity, kRubricMax, prefix + "clarity");
  check_range(s.specificity, kRubricMax, prefix + "specificity");
  if (source == Source::therapy) {
    if (!s.benefit) throw EvalError(prefix + "benefit is required for therapy prompts");
    check_range(*s.benefit, kRubricMax, prefix + "benefit");
  } else if (s.benefit) {
    throw EvalError(prefix + "benefit must be blank for movie prompts");
  }
  check_range(s.turing, kTuringMax, prefix + "turing");
}

int parse_int(const std::string& text, const std::string& field) {
  int v = 0;
  const char* end = text.data() + text.size();
  const auto [p, ec] = std::from_chars(text.data(), end, v);
  if (text.empty() || ec != std::errc() || p != end) throw EvalError(field + ": not an integer: '" + text + "'");
  return v;
}

std::optional<int> parse_optional_int(const std::string& text, const std::string& field) {
  if (text.empty()) return std::nullopt;
  return parse_int(text, field);
}

Source parse_source_field(const std::string& text) {
  try {
    return parse_source(text);
  } catch (const std::invalid_argument&) {
    throw EvalError("source: expected movie or therapy, got '" + text + "'");
  }
}

}  // namespace

const char* slot_name(Slot s) { return s == Slot::A ? "A" : "B"; }

Slot parse_slot(const std::string& name) {
  if (name == "A") return Slot::A;
  if (name == "B") return Slot::B;
  throw EvalError("slot must be A or B, got '" + name + "'");
}

void CodedPair::validate() const {
  if (id.empty()) throw EvalError("id must not be empty");
  check_scores(human, source, "h_");
  check_scores(model, source, "m_");
}

int rqi(int clarity, int specificity, std::optional<int> benefit, Source source) {
  check_range(clarity, kRubricMax, "clarity");
  check_range(specificity, kRubricMax, "specificity");
  int b = kMovieBenefit;
  if (source == Source::therapy) {
    if (!benefit) throw EvalError("benefit is required for therapy prompts");
    check_range(*benefit, kRubricMax, "benefit");
    b = *benefit;
  }
  return clarity * specificity * b;
}

int rqi(const ResponseScores& s, Source source) { return rqi(s.clarity, s.specificity, s.benefit, source); }

const std::vector<int>& rqi_values() {
  static const std::vector<int> values = [] {
    std::set<int> seen;
    for (int c = 1; c <= kRubricMax; ++c)
      for (int s = 1; s <= kRubricMax; ++s)
        for (int b = 1; b <= kRubricMax; ++b) seen.insert(c * s * b);
    return std::vector<int>(seen.begin(), seen.end());
  }();
  return values;
}

// ---- blinded presentation ----

BlindBatch blind_shuffle(std::span<const EvalPair> pairs, std::uint64_t seed) {
  if (pairs.empty()) throw EvalError("blind_shuffle needs at least one pair");
  BlindBatch batch;
  batch.seed = seed;
  Rng rng(splitmix64(seed ^ 0x626c696e64));
  for (const EvalPair& p : pairs) {
    if (p.id.empty()) throw EvalError("pair id must not be empty");
    if (batch.human_slot.count(p.id)) throw EvalError("duplicate pair id '" + p.id + "'");
    const Slot human = (rng() >> 63) ? Slot::B : Slot::A;
    batch.human_slot[p.id] = human;
    PresentedItem item{p.id, p.source, p.prompt, p.human_response, p.model_response};
    if (human == Slot::B) std::swap(item.a, item.b);
    batch.items.push_back(std::move(item));
  }
  shuffle(std::span<PresentedItem>(batch.items), rng);
  return batch;
}

void to_json(nlohmann::json& j, const PresentedItem& item) {
  j = {{"id", item.id}, {"source", source_name(item.source)}, {"prompt", item.prompt}, {"a", item.a}, {"b", item.b}};
}

void from_json(const nlohmann::json& j, PresentedItem& item) {
  item.id = j.at("id").get<std::string>();
  item.source = parse_source_field(j.at("source").get<std::string>());
  item.prompt = j.at("prompt").get<std::string>();
  item.a = j.at("a").get<std::string>();
  item.b = j.at("b").get<std::string>();
}

namespace {

void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw EvalError(path.string() + ": " + e.what());
  }
}

}  // namespace

void save_blind_batch(const std::filesystem::path& dir, const BlindBatch& batch) {
  std::filesystem::create_directories(dir);
  write_json_file(dir / "presentation.json",
                  {{"format", "psyt-eval-presentation"}, {"version", 1}, {"items", batch.items}});
  nlohmann::json key = nlohmann::json::object();
  for (const auto& [id, slot] : batch.human_slot) key[id] = slot_name(slot);
  write_json_file(dir / "key.json", {{"format", "psyt-eval-key"}, {"version", 1}, {"seed", batch.seed}, {"human_slot", key}});
}

BlindBatch load_blind_batch(const std::filesystem::path& dir) {
  const auto pres = read_json_file(dir / "presentation.json");
  const auto key = read_json_file(dir / "key.json");
  if (pres.value("format", "") != "psyt-eval-presentation" || key.value("format", "") != "psyt-eval-key")
    throw EvalError(dir.string() + ": not an evaluation batch");
  BlindBatch batch;
  batch.seed = key.at("seed").get<std::uint64_t>();
  batch.items = pres.at("items").get<std::vector<PresentedItem>>();
  for (const auto& [id, slot] : key.at("human_slot").items()) batch.human_slot[id] = parse_slot(slot.get<std::string>());
  std::set<std::string> ids;
  for (const auto& item : batch.items) {
    if (!ids.insert(item.id).second) throw EvalError("duplicate item id '" + item.id + "'");
    if (!batch.human_slot.count(item.id)) throw EvalError("key has no entry for item '" + item.id + "'");
  }
  if (ids.size() != batch.human_slot.size()) throw EvalError("key lists items missing from the presentation");
  return batch;
}

std::vector<EvalPair> read_eval_pairs(const std::filesystem::path& path) {
  const auto rows = read_csv_file(path.string());
  if (rows.empty()) throw EvalError(path.string() + ": empty file");
  const CsvRow& h = rows[0];
  const std::size_t c_id = csv_column(h, "id"), c_src = csv_column(h, "source"), c_prompt = csv_column(h, "prompt"),
                    c_human = csv_column(h, "human_response");
  const auto model_it = std::find(h.begin(), h.end(), "model_response");
  std::vector<EvalPair> out;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const CsvRow& row = rows[r];
    if (row.size() == 1 && row[0].empty()) continue;
    if (row.size() != h.size()) throw EvalError(path.string() + ": row " + std::to_string(r + 1) + " has wrong width");
    EvalPair p{row[c_id], parse_source_field(row[c_src]), row[c_prompt], row[c_human], ""};
    if (model_it != h.end()) p.model_response = row[static_cast<std::size_t>(model_it - h.begin())];
    out.push_back(std::move(p));
  }
  return out;
}

void write_eval_pairs(const std::filesystem::path& path, std::span<const EvalPair> pairs) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_csv_row(out, {"id", "source", "prompt", "human_response", "model_response"});
  for (const EvalPair& p : pairs)
    write_csv_row(out, {p.id, source_name(p.source), p.prompt, p.human_response, p.model_response});
}

// ---- coded pairs ----

const std::vector<std::string>& coded_csv_header() {
  static const std::vector<std::string> header{"id",          "source",        "prompt",    "human_response",
                                               "model_response", "h_clarity",  "h_specificity", "h_benefit",
                                               "h_turing",    "m_clarity",     "m_specificity", "m_benefit",
                                               "m_turing",    "evaluator"};
  return header;
}

std::vector<CodedPair> read_coded_csv(std::istream& in) {
  const auto rows = read_csv(in);
  if (rows.empty()) throw EvalError("coded csv: missing header");
  const CsvRow& h = rows[0];
  std::vector<std::size_t> col;
  for (const std::string& name : coded_csv_header()) {
    try {
      col.push_back(csv_column(h, name));
    } catch (const CsvError&) {
      throw EvalError("coded csv: missing column " + name);
    }
  }
  std::vector<CodedPair> out;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const CsvRow& row = rows[r];
    if (row.size() == 1 && row[0].empty()) continue;
    if (row.size() != h.size()) throw EvalError("coded csv: row " + std::to_string(r + 1) + " has wrong width");
    auto f = [&](std::size_t i) -> const std::string& { return row[col[i]]; };
    CodedPair p;
    try {
      p.id = f(0);
      p.source = parse_source_field(f(1));
      p.prompt = f(2);
      p.human_response = f(3);
      p.model_response = f(4);
      p.human = {parse_int(f(5), "h_clarity"), parse_int(f(6), "h_specificity"), parse_optional_int(f(7), "h_benefit"),
                 parse_int(f(8), "h_turing")};
      p.model = {parse_int(f(9), "m_clarity"), parse_int(f(10), "m_specificity"),
                 parse_optional_int(f(11), "m_benefit"), parse_int(f(12), "m_turing")};
      p.evaluator = f(13);
      p.validate();
    } catch (const EvalError& e) {
      throw EvalError("coded csv row " + std::to_string(r + 1) + ": " + e.what());
    }
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<CodedPair> read_coded_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return read_coded_csv(in);
}

void write_coded_csv(std::ostream& out, std::span<const CodedPair> pairs) {
  write_csv_row(out, coded_csv_header());
  auto opt = [](const std::optional<int>& v) { return v ? std::to_string(*v) : std::string(); };
  for (const CodedPair& p : pairs) {
    write_csv_row(out, {p.id, source_name(p.source), p.prompt, p.human_response, p.model_response,
                        std::to_string(p.human.clarity), std::to_string(p.human.specificity), opt(p.human.benefit),
                        std::to_string(p.human.turing), std::to_string(p.model.clarity),
                        std::to_string(p.model.specificity), opt(p.model.benefit), std::to_string(p.model.turing),
                        p.evaluator});
  }
}

void write_coded_csv(const std::filesystem::path& path, std::span<const CodedPair> pairs) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_coded_csv(out, pairs);
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace psyt
