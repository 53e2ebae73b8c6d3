#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "psyt/corpus.h"

namespace psyt {

// Bad rubric value or malformed evaluation file; the message names the field.
class EvalError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Rubric: clarity, specificity and benefit take 1..4; turing takes 1..3
// (1 = likely generated, 3 = likely human-written).
inline constexpr int kRubricMax = 4;
inline constexpr int kTuringMax = 3;
inline constexpr int kMovieBenefit = 2;

struct ResponseScores {
  int clarity = 1;
  int specificity = 1;
  std::optional<int> benefit;  // absent for movie prompts
  int turing = 1;

  bool operator==(const ResponseScores&) const = default;
};

enum class Slot { A, B };
const char* slot_name(Slot s);
Slot parse_slot(const std::string& name);

struct CodedPair {
  std::string id;
  Source source = Source::therapy;
  std::string prompt;
  std::string human_response;
  std::string model_response;
  ResponseScores human;
  ResponseScores model;
  std::string evaluator;
  std::optional<Slot> human_slot;  // not part of the CSV form

  // Throws EvalError naming the offending column (h_clarity, m_benefit, ...).
  void validate() const;
  bool operator==(const CodedPair&) const = default;
};

// clarity x specificity x benefit, where movie prompts use benefit 2.
int rqi(int clarity, int specificity, std::optional<int> benefit, Source source);
int rqi(const ResponseScores& s, Source source);

// The 16 products attainable from three 1..4 factors, ascending.
const std::vector<int>& rqi_values();

// ---- blinded presentation ----

struct EvalPair {
  std::string id;
  Source source = Source::therapy;
  std::string prompt;
  std::string human_response;
  std::string model_response;

  bool operator==(const EvalPair&) const = default;
};

// What an evaluator sees: two unlabeled responses.
struct PresentedItem {
  std::string id;
  Source source = Source::therapy;
  std::string prompt;
  std::string a;
  std::string b;

  bool operator==(const PresentedItem&) const = default;
};

struct BlindBatch {
  std::uint64_t seed = 0;
  std::vector<PresentedItem> items;
  std::map<std::string, Slot> human_slot;  // the key, kept apart from items

  bool operator==(const BlindBatch&) const = default;
};

// Each pair's responses go to slots A/B by a seeded coin, then the item
// order is shuffled. Throws on an empty list or repeated ids.
BlindBatch blind_shuffle(std::span<const EvalPair> pairs, std::uint64_t seed);

void to_json(nlohmann::json& j, const PresentedItem& item);
void from_json(const nlohmann::json& j, PresentedItem& item);

// A batch directory holds presentation.json (items only) and key.json.
void save_blind_batch(const std::filesystem::path& dir, const BlindBatch& batch);
BlindBatch load_blind_batch(const std::filesystem::path& dir);

// id,source,prompt,human_response[,model_response]
std::vector<EvalPair> read_eval_pairs(const std::filesystem::path& path);
void write_eval_pairs(const std::filesystem::path& path, std::span<const EvalPair> pairs);

// ---- coded pairs ----

const std::vector<std::string>& coded_csv_header();
std::vector<CodedPair> read_coded_csv(std::istream& in);
std::vector<CodedPair> read_coded_csv(const std::filesystem::path& path);
void write_coded_csv(std::ostream& out, std::span<const CodedPair> pairs);
void write_coded_csv(const std::filesystem::path& path, std::span<const CodedPair> pairs);

// ---- aggregate report ----

struct GridCell {
  int human = 0;
  int model = 0;
  std::size_t count = 0;
  double percent = 0.0;
  double z = 0.0;  // against equal occupancy of every cell

  bool operator==(const GridCell&) const = default;
};

struct Grid {
  std::vector<int> levels;      // axis values, shared by both axes
  std::vector<GridCell> cells;  // row-major: human level, then model level

  const GridCell& at(int human, int model) const;
  bool operator==(const Grid&) const = default;
};

// Spearman rank correlation with a two-sided t-approximation p-value.
// Empty when either side has no rank variance.
struct RankCorrelation {
  std::optional<double> rho;
  std::optional<double> p_value;

  bool operator==(const RankCorrelation&) const = default;
};

struct EvalReport {
  std::size_t n = 0;
  double pct_model_rqi_at_or_above = 0.0;
  double pct_model_turing_at_or_above = 0.0;
  double mean_rqi_difference = 0.0;  // model - human
  double sd_rqi_difference = 0.0;    // population
  std::size_t model_rqi_losses = 0;  // pairs with model RQI < human RQI
  // Share of those losses whose difference z-score is below -1.
  double pct_significant_human_wins_rqi = 0.0;
  bool degenerate_rqi_difference = false;  // sd == 0
  double pct_recognized_generated = 0.0;   // model turing == 1
  Grid rqi_grid;
  Grid turing_grid;
  RankCorrelation rqi_correlation;
  RankCorrelation turing_correlation;

  bool operator==(const EvalReport&) const = default;
};

// Requires n >= 2; every pair is validated first.
EvalReport aggregate(std::span<const CodedPair> coded);

RankCorrelation spearman(std::span<const double> x, std::span<const double> y);

void to_json(nlohmann::json& j, const EvalReport& r);
void from_json(const nlohmann::json& j, EvalReport& r);

// One header, one summary row, then one row per grid cell.
void write_report_csv(std::ostream& out, const EvalReport& r);

enum class ReportFormat { json, csv };
ReportFormat parse_report_format(const std::string& name);
// Throws std::runtime_error when the path cannot be written.
void export_report(const EvalReport& r, ReportFormat fmt, const std::filesystem::path& path);

// Human-readable headline lines, percentages with two decimals.
std::string format_headlines(const EvalReport& r);

}  // namespace psyt
