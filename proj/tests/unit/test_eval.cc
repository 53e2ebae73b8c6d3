#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "eval_fixtures.h"
#include "psyt/eval.h"
#include "psyt/random.h"
#include "test_util.h"

using namespace psyt;
using psyt::testing::headline_coded_set;

namespace {

CodedPair simple_pair(std::string id, Source src, ResponseScores h, ResponseScores m) {
  CodedPair p;
  p.id = std::move(id);
  p.source = src;
  p.human = h;
  p.model = m;
  return p;
}

std::vector<CodedPair> random_coded(Rng& rng, std::size_t n) {
  std::vector<CodedPair> out;
  auto draw = [&](Source src) {
    ResponseScores s;
    s.clarity = 1 + static_cast<int>(uniform_index(rng, 4));
    s.specificity = 1 + static_cast<int>(uniform_index(rng, 4));
    if (src == Source::therapy) s.benefit = 1 + static_cast<int>(uniform_index(rng, 4));
    s.turing = 1 + static_cast<int>(uniform_index(rng, 3));
    return s;
  };
  for (std::size_t i = 0; i < n; ++i) {
    const Source src = uniform_index(rng, 2) ? Source::therapy : Source::movie;
    out.push_back(simple_pair("p" + std::to_string(i), src, draw(src), draw(src)));
  }
  return out;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST_CASE("rqi examples and bounds") {
  CHECK(rqi(1, 1, 1, Source::therapy) == 1);
  CHECK(rqi(4, 4, 4, Source::therapy) == 64);
  CHECK(rqi(3, 2, std::nullopt, Source::movie) == 12);
  CHECK(rqi(3, 2, 4, Source::movie) == 12);

  int lo = 1000, hi = 0;
  for (int c = 1; c <= 4; ++c)
    for (int s = 1; s <= 4; ++s)
      for (int b = 1; b <= 4; ++b) {
        const int v = rqi(c, s, b, Source::therapy);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
        if (c < 4) CHECK(rqi(c + 1, s, b, Source::therapy) >= v);
        if (s < 4) CHECK(rqi(c, s + 1, b, Source::therapy) >= v);
        if (b < 4) CHECK(rqi(c, s, b + 1, Source::therapy) >= v);
      }
  CHECK(lo == 1);
  CHECK(hi == 64);
  CHECK(rqi_values().size() == 16);
  CHECK(rqi_values().front() == 1);
  CHECK(rqi_values().back() == 64);

  auto message = [](auto fn) {
    try {
      fn();
    } catch (const EvalError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  CHECK(message([] { rqi(5, 1, 1, Source::therapy); }).find("clarity") != std::string::npos);
  CHECK(message([] { rqi(1, 0, 1, Source::therapy); }).find("specificity") != std::string::npos);
  CHECK(message([] { rqi(1, 1, 9, Source::therapy); }).find("benefit") != std::string::npos);
  CHECK(message([] { rqi(1, 1, std::nullopt, Source::therapy); }).find("benefit") != std::string::npos);
}

TEST_CASE("coded pair validation names the field") {
  CodedPair p = simple_pair("x", Source::therapy, {1, 2, 3, 1}, {4, 4, 4, 3});
  CHECK_NOTHROW(p.validate());
  p.model.turing = 4;
  CHECK_THROWS_WITH_AS(p.validate(), doctest::Contains("m_turing"), EvalError);
  p.model.turing = 3;
  p.human.benefit.reset();
  CHECK_THROWS_WITH_AS(p.validate(), doctest::Contains("h_benefit"), EvalError);
  p.source = Source::movie;
  CHECK_THROWS_WITH_AS(p.validate(), doctest::Contains("m_benefit"), EvalError);
  p.model.benefit.reset();
  CHECK_NOTHROW(p.validate());
}

TEST_CASE("blind shuffle") {
  std::vector<EvalPair> pairs;
  for (int i = 0; i < 1000; ++i)
    pairs.push_back({"q" + std::to_string(i), i % 2 ? Source::movie : Source::therapy, "p" + std::to_string(i),
                     "human" + std::to_string(i), "model" + std::to_string(i)});
  const BlindBatch a = blind_shuffle(pairs, 17), b = blind_shuffle(pairs, 17);
  CHECK(a == b);
  CHECK(blind_shuffle(pairs, 18).items != a.items);

  std::size_t human_in_a = 0;
  std::set<std::string> seen;
  for (const PresentedItem& item : a.items) {
    seen.insert(item.id);
    const int i = std::stoi(item.id.substr(1));
    const Slot hs = a.human_slot.at(item.id);
    CHECK((hs == Slot::A ? item.a : item.b) == pairs[i].human_response);
    CHECK((hs == Slot::A ? item.b : item.a) == pairs[i].model_response);
    CHECK(item.prompt == pairs[i].prompt);
    if (hs == Slot::A) ++human_in_a;
  }
  CHECK(seen.size() == 1000);
  // Binomial(1000, 0.5): sd = sqrt(250).
  CHECK(std::abs(static_cast<double>(human_in_a) - 500.0) <= 3.0 * std::sqrt(250.0));
  // Order is permuted: not everything stays in place.
  std::size_t in_place = 0;
  for (std::size_t i = 0; i < a.items.size(); ++i) in_place += a.items[i].id == pairs[i].id;
  CHECK(in_place < 20);

  const nlohmann::json payload = a.items;
  for (const auto& item : payload) {
    std::set<std::string> keys;
    for (const auto& [k, v] : item.items()) keys.insert(k);
    CHECK(keys == std::set<std::string>{"id", "source", "prompt", "a", "b"});
  }

  CHECK_THROWS_AS(blind_shuffle(std::vector<EvalPair>{}, 1), EvalError);
  std::vector<EvalPair> dup{pairs[0], pairs[0]};
  CHECK_THROWS_AS(blind_shuffle(dup, 1), EvalError);

  const auto dir = psyt::testing::scratch_dir("blind");
  const std::vector<EvalPair> few(pairs.begin(), pairs.begin() + 5);
  const BlindBatch small = blind_shuffle(few, 3);
  save_blind_batch(dir, small);
  CHECK(load_blind_batch(dir) == small);
  const std::string pres = read_file(dir / "presentation.json");
  CHECK(pres.find("human_slot") == std::string::npos);
  CHECK(pres.find("origin") == std::string::npos);
}

TEST_CASE("eval pair csv") {
  const auto pairs = read_eval_pairs(psyt::testing::fixture_dir() / "eval" / "pairs.csv");
  REQUIRE(pairs.size() == 6);
  CHECK(pairs[0].prompt == "I keep putting off calling my sister, and now it feels too late.");
  CHECK(pairs[2].prompt == "My boss said I was \"too sensitive\" and I can't stop replaying it.");
  CHECK(pairs[3].source == Source::movie);
  const auto dir = psyt::testing::scratch_dir("eval_pairs");
  write_eval_pairs(dir / "p.csv", pairs);
  CHECK(read_eval_pairs(dir / "p.csv") == pairs);
}

TEST_CASE("headline figures as arithmetic identities") {
  const auto coded = headline_coded_set();
  const EvalReport r = aggregate(coded);
  CHECK(r.n == 134);
  CHECK(r.pct_model_rqi_at_or_above == doctest::Approx(100.0 * 80 / 134).epsilon(1e-15));
  CHECK(r.pct_model_turing_at_or_above == doctest::Approx(100.0 * 90 / 134).epsilon(1e-15));
  CHECK(r.pct_recognized_generated == doctest::Approx(100.0 * 28 / 134).epsilon(1e-15));
  const std::string text = format_headlines(r);
  CHECK(text.find("59.70%") != std::string::npos);
  CHECK(text.find("67.16%") != std::string::npos);
  CHECK(text.find("20.90%") != std::string::npos);
  CHECK(r.model_rqi_losses == 54);

  for (const Grid* g : {&r.rqi_grid, &r.turing_grid}) {
    std::size_t total = 0;
    double pct = 0.0;
    for (const GridCell& c : g->cells) {
      total += c.count;
      pct += c.percent;
    }
    CHECK(total == 134);
    CHECK(std::abs(pct - 100.0) <= 0.01);
  }
  CHECK(r.rqi_grid.cells.size() == 256);
  CHECK(r.turing_grid.cells.size() == 9);
}

TEST_CASE("aggregate on identical scores") {
  std::vector<CodedPair> coded;
  for (int i = 0; i < 5; ++i)
    coded.push_back(simple_pair("s" + std::to_string(i), Source::therapy, {2, 3, 2, 2}, {2, 3, 2, 2}));
  const EvalReport r = aggregate(coded);
  CHECK(r.pct_model_rqi_at_or_above == 100.0);
  CHECK(r.pct_model_turing_at_or_above == 100.0);
  CHECK(r.mean_rqi_difference == 0.0);
  CHECK(r.degenerate_rqi_difference);
  CHECK(r.pct_significant_human_wins_rqi == 0.0);
  CHECK(r.pct_recognized_generated == 0.0);
  CHECK(r.rqi_grid.at(12, 12).count == 5);
  CHECK(!r.rqi_correlation.rho);
  CHECK_THROWS_AS(aggregate(std::span(coded).first(1)), EvalError);
}

TEST_CASE("significance and grid z by hand") {
  // Differences (model - human) -4, 0, 0, 6: mean 0.5, population variance
  // (20.25 + 0.25 + 0.25 + 30.25) / 4 = 12.75; z(-4) = -4.5 / 3.57 = -1.26.
  std::vector<CodedPair> coded{simple_pair("a", Source::therapy, {2, 2, 2, 1}, {1, 2, 2, 1}),
                               simple_pair("b", Source::therapy, {1, 1, 1, 2}, {1, 1, 1, 1}),
                               simple_pair("c", Source::movie, {1, 1, {}, 3}, {1, 1, {}, 3}),
                               simple_pair("d", Source::movie, {1, 1, {}, 1}, {2, 2, {}, 2})};
  EvalReport r = aggregate(coded);
  CHECK(r.mean_rqi_difference == 0.5);
  CHECK(r.sd_rqi_difference == doctest::Approx(std::sqrt(12.75)).epsilon(1e-15));
  CHECK(r.model_rqi_losses == 1);
  CHECK(r.pct_significant_human_wins_rqi == 100.0);

  // Differences -2, -2, 0, 2: mean -0.5, variance 2.75; z(-2) = -0.90.
  coded = {simple_pair("a", Source::movie, {2, 1, {}, 1}, {1, 1, {}, 1}),
           simple_pair("b", Source::movie, {2, 1, {}, 1}, {1, 1, {}, 1}),
           simple_pair("c", Source::movie, {1, 1, {}, 1}, {1, 1, {}, 1}),
           simple_pair("d", Source::therapy, {1, 1, 1, 1}, {1, 1, 3, 1})};
  r = aggregate(coded);
  CHECK(r.mean_rqi_difference == -0.5);
  CHECK(r.sd_rqi_difference == doctest::Approx(std::sqrt(2.75)).epsilon(1e-15));
  CHECK(r.model_rqi_losses == 2);
  CHECK(r.pct_significant_human_wins_rqi == 0.0);
  CHECK(r.pct_model_rqi_at_or_above == 50.0);

  // Turing grid: all four pairs at (1, 1); uniform null over 9 cells.
  const double e = 4.0 / 9.0, sd = std::sqrt(4.0 * (1.0 / 9.0) * (8.0 / 9.0));
  CHECK(r.turing_grid.at(1, 1).count == 4);
  CHECK(r.turing_grid.at(1, 1).z == doctest::Approx((4.0 - e) / sd).epsilon(1e-14));
  CHECK(r.turing_grid.at(2, 3).z == doctest::Approx(-e / sd).epsilon(1e-14));
  CHECK(r.turing_grid.at(1, 1).percent == 100.0);
  CHECK(r.pct_recognized_generated == 100.0);
}

TEST_CASE("aggregate is permutation invariant") {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    auto coded = random_coded(rng, 40);
    const EvalReport base = aggregate(coded);
    shuffle(std::span<CodedPair>(coded), rng);
    CHECK(aggregate(coded) == base);
  }
}

TEST_CASE("swapping human and model mirrors at-or-above with ties") {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    auto coded = random_coded(rng, 30);
    std::size_t rqi_ties = 0, tur_ties = 0;
    for (const auto& p : coded) {
      rqi_ties += rqi(p.human, p.source) == rqi(p.model, p.source);
      tur_ties += p.human.turing == p.model.turing;
    }
    const EvalReport r = aggregate(coded);
    for (auto& p : coded) std::swap(p.human, p.model);
    const EvalReport s = aggregate(coded);
    const double t_rqi = 100.0 * rqi_ties / 30.0, t_tur = 100.0 * tur_ties / 30.0;
    CHECK(s.pct_model_rqi_at_or_above == doctest::Approx(100.0 - r.pct_model_rqi_at_or_above + t_rqi));
    CHECK(s.pct_model_turing_at_or_above == doctest::Approx(100.0 - r.pct_model_turing_at_or_above + t_tur));
  }
}

TEST_CASE("spearman against reference values") {
  // Reference values from an independent statistics package.
  const std::vector<double> x{1, 2, 2, 3, 5, 4, 6, 6, 8, 7}, y{2, 1, 3, 3, 4, 6, 5, 8, 7, 9};
  RankCorrelation c = spearman(x, y);
  REQUIRE(c.rho);
  CHECK(*c.rho == doctest::Approx(0.8837961815702378).epsilon(1e-12));
  CHECK(*c.p_value == doctest::Approx(0.0006917934075651795).epsilon(1e-8));
  const std::vector<double> u{3, 1, 4, 1, 5, 9, 2, 6}, v{2, 7, 1, 8, 2, 8, 1, 8};
  c = spearman(u, v);
  CHECK(*c.rho == doctest::Approx(0.19885368120992467).epsilon(1e-12));
  CHECK(*c.p_value == doctest::Approx(0.6368617833253285).epsilon(1e-8));

  const std::vector<double> flat{2, 2, 2}, any{1, 2, 3};
  CHECK(!spearman(flat, any).rho);
  c = spearman(any, any);
  CHECK(*c.rho == 1.0);
  CHECK(*c.p_value == 0.0);
}

TEST_CASE("coded csv round trip") {
  const auto golden = psyt::testing::fixture_dir() / "eval" / "coded.csv";
  const auto coded = read_coded_csv(golden);
  REQUIRE(coded.size() == 6);
  CHECK(coded[0].human == ResponseScores{4, 4, 4, 3});
  CHECK(coded[3].model == ResponseScores{3, 3, std::nullopt, 3});
  std::ostringstream out;
  write_coded_csv(out, coded);
  CHECK(out.str() == read_file(golden));

  Rng rng(12);
  auto many = random_coded(rng, 25);
  many[3].prompt = "has, comma \"and quotes\"\nand a newline";
  many[4].evaluator = "eve";
  std::ostringstream o2;
  write_coded_csv(o2, many);
  std::istringstream i2(o2.str());
  CHECK(read_coded_csv(i2) == many);

  std::string header;
  for (const auto& h : coded_csv_header()) header += (header.empty() ? "" : ",") + h;
  CHECK(header ==
        "id,source,prompt,human_response,model_response,h_clarity,h_specificity,h_benefit,h_turing,"
        "m_clarity,m_specificity,m_benefit,m_turing,evaluator");

  std::istringstream bad(header + "\nx,therapy,p,h,m,5,1,1,1,1,1,1,1,e\n");
  CHECK_THROWS_WITH_AS(read_coded_csv(bad), doctest::Contains("h_clarity"), EvalError);
  std::istringstream bad2(header + "\nx,therapy,p,h,m,1,1,,1,1,1,1,1,e\n");
  CHECK_THROWS_WITH_AS(read_coded_csv(bad2), doctest::Contains("h_benefit"), EvalError);
  std::istringstream missing("id,source\nx,movie\n");
  CHECK_THROWS_AS(read_coded_csv(missing), EvalError);
}

TEST_CASE("report export") {
  const EvalReport r = aggregate(headline_coded_set());
  const nlohmann::json j = r;
  CHECK(j.get<EvalReport>() == r);
  CHECK(nlohmann::json::parse(j.dump()).get<EvalReport>() == r);

  std::ostringstream csv;
  write_report_csv(csv, r);
  std::size_t lines = 0;
  for (char ch : csv.str()) lines += ch == '\n';
  CHECK(lines == 1 + 1 + 256 + 9);

  const auto dir = psyt::testing::scratch_dir("report");
  export_report(r, ReportFormat::json, dir / "r.json");
  std::ifstream in(dir / "r.json");
  CHECK(nlohmann::json::parse(in).get<EvalReport>() == r);
  CHECK_THROWS_AS(export_report(r, ReportFormat::csv, dir / "no" / "such" / "dir" / "r.csv"), std::runtime_error);
  CHECK(parse_report_format("csv") == ReportFormat::csv);
  CHECK_THROWS(parse_report_format("xml"));
}

TEST_CASE("fixture report golden") {
  const auto coded = read_coded_csv(psyt::testing::fixture_dir() / "eval" / "coded.csv");
  const EvalReport r = aggregate(coded);
  // Hand oracle. RQI human/model: t1 64/12, t2 36/12, t3 48/24, m1 12/18,
  // m2 16/8, m3 18/18. Turing human/model: 3/2, 3/1, 2/3, 3/3, 2/1, 3/2.
  CHECK(r.pct_model_rqi_at_or_above == doctest::Approx(100.0 * 2 / 6));
  CHECK(r.pct_model_turing_at_or_above == doctest::Approx(100.0 * 2 / 6));
  CHECK(r.pct_recognized_generated == doctest::Approx(100.0 * 2 / 6));
  CHECK(r.mean_rqi_difference == doctest::Approx((-52.0 - 24 - 24 + 6 - 8 + 0) / 6));
  CHECK(r.model_rqi_losses == 4);
  // sd = sqrt(2222 / 6); only t1 (z = -35 / 19.24) is beyond -1.
  CHECK(r.sd_rqi_difference == doctest::Approx(std::sqrt(2222.0 / 6)));
  CHECK(r.pct_significant_human_wins_rqi == 25.0);

  const auto golden = psyt::testing::golden_dir() / "fixture_report.json";
  if (psyt::testing::regenerate_golden()) export_report(r, ReportFormat::json, golden);
  std::ifstream in(golden);
  REQUIRE(in);
  CHECK(nlohmann::json::parse(in).get<EvalReport>() == r);
}
