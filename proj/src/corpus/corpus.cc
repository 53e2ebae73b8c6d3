#include "psyt/corpus.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <unordered_map>

#include "psyt/csv.h"

namespace psyt {

namespace {

constexpr std::string_view kCornellDelim = " +++$+++ ";

std::vector<std::string> split_on(std::string_view line, std::string_view delim) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(delim, start);
    if (pos == std::string_view::npos) {
      out.emplace_back(line.substr(start));
      return out;
    }
    out.emplace_back(line.substr(start, pos - start));
    start = pos + delim.size();
  }
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorpusError("cannot open corpus file " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

// "L1045" -> 1045, or -1.
long line_number(const std::string& id) {
  if (id.size() < 2 || id[0] != 'L') return -1;
  long n = 0;
  for (std::size_t i = 1; i < id.size(); ++i) {
    if (id[i] < '0' || id[i] > '9') return -1;
    n = n * 10 + (id[i] - '0');
  }
  return n;
}

std::string clean_utterance(const std::string& raw) { return collapse_whitespace(clean_html(raw)); }

void emit_conversation(const std::vector<const std::string*>& texts, std::vector<UtterancePair>& out,
                       LoadStats& stats) {
  for (std::size_t i = 0; i + 1 < texts.size(); ++i) {
    UtterancePair p{clean_utterance(*texts[i]), clean_utterance(*texts[i + 1]), Source::movie};
    if (p.prompt.empty() || p.response.empty()) {
      ++stats.empty_dropped;
      continue;
    }
    out.push_back(std::move(p));
  }
}

struct CornellLine {
  long number;
  std::string movie;
  std::string text;
};

std::vector<UtterancePair> load_cornell(const std::string& path, const std::vector<std::string>& lines,
                                        LoadStats& stats) {
  std::unordered_map<std::string, CornellLine> by_id;
  std::vector<std::string> order;
  for (const std::string& line : lines) {
    if (line.empty()) continue;
    ++stats.lines;
    auto f = split_on(line, kCornellDelim);
    const long n = f.size() == 5 ? line_number(f[0]) : -1;
    if (n < 0) {
      ++stats.malformed;
      continue;
    }
    if (by_id.emplace(f[0], CornellLine{n, f[2], f[4]}).second) order.push_back(f[0]);
  }

  std::vector<UtterancePair> out;
  const auto conv_path = std::filesystem::path(path).parent_path() / "movie_conversations.txt";
  if (std::filesystem::exists(conv_path)) {
    for (const std::string& line : read_lines(conv_path.string())) {
      if (line.empty()) continue;
      auto f = split_on(line, kCornellDelim);
      if (f.size() != 4) {
        ++stats.malformed;
        continue;
      }
      // ['L194', 'L195', ...]
      std::vector<const std::string*> texts;
      const std::string& ids = f[3];
      for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] != 'L') continue;
        std::size_t j = i + 1;
        while (j < ids.size() && ids[j] >= '0' && ids[j] <= '9') ++j;
        auto it = by_id.find(ids.substr(i, j - i));
        if (it == by_id.end()) {
          emit_conversation(texts, out, stats);
          texts.clear();
        } else {
          texts.push_back(&it->second.text);
        }
        i = j - 1;
      }
      emit_conversation(texts, out, stats);
    }
    return out;
  }

  std::vector<std::string> movies;
  std::map<std::string, std::vector<const CornellLine*>> per_movie;
  for (const std::string& id : order) {
    const CornellLine& l = by_id.at(id);
    if (!per_movie.count(l.movie)) movies.push_back(l.movie);
    per_movie[l.movie].push_back(&l);
  }
  for (const std::string& m : movies) {
    auto& ls = per_movie[m];
    std::sort(ls.begin(), ls.end(), [](const CornellLine* a, const CornellLine* b) { return a->number < b->number; });
    std::vector<const std::string*> texts;
    for (std::size_t i = 0; i < ls.size(); ++i) {
      if (i > 0 && ls[i]->number != ls[i - 1]->number + 1) {
        emit_conversation(texts, out, stats);
        texts.clear();
      }
      texts.push_back(&ls[i]->text);
    }
    emit_conversation(texts, out, stats);
  }
  return out;
}

}  // namespace

const char* source_name(Source s) { return s == Source::movie ? "movie" : "therapy"; }

Source parse_source(const std::string& name) {
  if (name == "movie") return Source::movie;
  if (name == "therapy") return Source::therapy;
  throw std::invalid_argument("unknown source '" + name + "'");
}

std::vector<UtterancePair> load_movie_corpus(const std::string& path, LoadStats* stats) {
  LoadStats local;
  LoadStats& st = stats ? *stats : local;
  const std::vector<std::string> lines = read_lines(path);
  const bool cornell = std::any_of(lines.begin(), lines.end(),
                                   [](const std::string& l) { return l.find(kCornellDelim) != std::string::npos; });
  if (cornell) return load_cornell(path, lines, st);

  std::vector<UtterancePair> out;
  for (const std::string& line : lines) {
    if (trim(line).empty()) continue;
    ++st.lines;
    auto f = split_on(line, "\t");
    if (f.size() != 2) {
      ++st.malformed;
      continue;
    }
    UtterancePair p{clean_utterance(f[0]), clean_utterance(f[1]), Source::movie};
    if (p.prompt.empty() || p.response.empty()) {
      ++st.empty_dropped;
      continue;
    }
    out.push_back(std::move(p));
  }
  return out;
}

double token_overlap(const std::string& question, const std::string& answer) {
  std::set<std::string> q, a;
  for (auto& t : tokenize(question))
    if (is_word_token(t)) q.insert(std::move(t));
  for (auto& t : tokenize(answer))
    if (is_word_token(t)) a.insert(std::move(t));
  if (q.empty() && a.empty()) return 0.0;
  std::size_t common = 0;
  for (const auto& t : q) common += a.count(t);
  return static_cast<double>(common) / static_cast<double>(q.size() + a.size() - common);
}

std::vector<std::size_t> align_sentences(std::span<const std::string> q_sents, std::span<const std::string> a_sents,
                                         const Similarity& similarity) {
  const std::size_t n = q_sents.size(), m = a_sents.size();
  if (n == 0 || m == 0) throw std::invalid_argument("align_sentences needs sentences on both sides");
  std::vector<double> sim(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) sim[i * m + j] = similarity(q_sents[i], a_sents[j]);

  // best[j * n + i]: top score for answers j.. when all of them map to questions >= i.
  std::vector<double> best((m + 1) * n, 0.0);
  auto choice = [&](std::size_t j, std::size_t k) { return sim[k * m + j] + best[(j + 1) * n + k]; };
  for (std::size_t j = m; j-- > 0;) {
    double running = -INFINITY;
    for (std::size_t i = n; i-- > 0;) {
      running = std::max(running, choice(j, i));
      best[j * n + i] = running;
    }
  }
  std::vector<std::size_t> assign(m);
  std::size_t lo = 0;
  for (std::size_t j = 0; j < m; ++j) {
    const double target = best[j * n + lo];
    std::size_t k = lo;
    while (choice(j, k) != target) ++k;
    assign[j] = lo = k;
  }
  return assign;
}

std::vector<UtterancePair> pair_sentences(std::span<const std::string> q_sents, std::span<const std::string> a_sents,
                                          const Similarity& similarity, const GreetingLexicon& lexicon) {
  const auto q = drop_leading_niceties(q_sents, lexicon);
  const auto a = drop_leading_niceties(a_sents, lexicon);
  if (q.empty() || a.empty()) return {};
  const auto assign = align_sentences(q, a, similarity);
  std::vector<UtterancePair> out;
  out.reserve(a.size());
  for (std::size_t j = 0; j < a.size(); ++j)
    out.push_back({collapse_whitespace(q[assign[j]]), collapse_whitespace(a[j]), Source::therapy});
  return out;
}

std::vector<UtterancePair> load_therapy_csv(const std::string& path, const GreetingLexicon& lexicon,
                                            const Similarity& similarity, LoadStats* stats) {
  LoadStats local;
  LoadStats& st = stats ? *stats : local;
  std::vector<CsvRow> rows;
  try {
    rows = read_csv_file(path);
  } catch (const CsvError& e) {
    throw CorpusError(e.what());
  }
  if (rows.empty()) throw CorpusError("therapy csv " + path + " has no header");
  std::size_t qc, ac;
  try {
    qc = csv_column(rows[0], "question_text");
    ac = csv_column(rows[0], "answer_text");
  } catch (const CsvError& e) {
    throw CorpusError(path + ": " + e.what());
  }
  std::vector<UtterancePair> out;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const CsvRow& row = rows[r];
    if (row.size() == 1 && row[0].empty()) continue;
    ++st.lines;
    if (row.size() != rows[0].size()) {
      ++st.malformed;
      continue;
    }
    const auto q = chunk_sentences(clean_html(row[qc]));
    const auto a = chunk_sentences(clean_html(row[ac]));
    if (q.empty() || a.empty()) {
      ++st.empty_dropped;
      continue;
    }
    auto pairs = pair_sentences(q, a, similarity, lexicon);
    if (pairs.empty()) {
      ++st.nicety_dropped;
      continue;
    }
    for (auto& p : pairs) out.push_back(std::move(p));
  }
  return out;
}

namespace {

struct RarityTable {
  std::unordered_map<std::string, double> rarity;
  double threshold = INFINITY;
};

RarityTable rarity_table(std::span<const UtterancePair> pairs, double sigma) {
  if (pairs.empty()) throw std::invalid_argument("filter_rare_phrases: empty corpus");
  std::unordered_map<std::string, std::size_t> counts;
  std::size_t total = 0;
  for (const auto& p : pairs) {
    for (const std::string* side : {&p.prompt, &p.response}) {
      for (auto& t : tokenize(*side)) {
        if (!is_word_token(t)) continue;
        ++counts[std::move(t)];
        ++total;
      }
    }
  }
  RarityTable table;
  if (counts.empty()) return table;
  // Sorted so the floating-point sums do not depend on hash order.
  std::vector<std::pair<std::string, std::size_t>> sorted(counts.begin(), counts.end());
  std::sort(sorted.begin(), sorted.end());
  double mean = 0.0;
  for (const auto& [w, c] : sorted) {
    const double r = -std::log(static_cast<double>(c) / static_cast<double>(total));
    table.rarity.emplace(w, r);
    mean += r;
  }
  mean /= static_cast<double>(sorted.size());
  double var = 0.0;
  for (const auto& [w, c] : sorted) {
    const double d = table.rarity.at(w) - mean;
    var += d * d;
  }
  const double sd = std::sqrt(var / static_cast<double>(sorted.size()));
  if (sd > 0.0) table.threshold = mean + sigma * sd;
  return table;
}

}  // namespace

double rarity_threshold(std::span<const UtterancePair> pairs, double sigma) {
  return rarity_table(pairs, sigma).threshold;
}

std::vector<UtterancePair> filter_rare_phrases(std::span<const UtterancePair> pairs, double sigma) {
  const RarityTable table = rarity_table(pairs, sigma);
  std::vector<UtterancePair> out;
  for (const auto& p : pairs) {
    bool rare = false;
    for (const std::string* side : {&p.prompt, &p.response}) {
      for (const auto& t : tokenize(*side)) {
        if (is_word_token(t) && table.rarity.at(t) > table.threshold) {
          rare = true;
          break;
        }
      }
      if (rare) break;
    }
    if (!rare) out.push_back(p);
  }
  return out;
}

}  // namespace psyt
