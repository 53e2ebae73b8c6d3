#include "psyt/dataset.h"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace psyt {

namespace {

constexpr const char* kFormat = "psyt-prepared";
constexpr int kVersion = 1;

void put_i32(std::ostream& out, std::int32_t v) {
  const auto u = static_cast<std::uint32_t>(v);
  const char b[4] = {static_cast<char>(u & 0xff), static_cast<char>((u >> 8) & 0xff),
                     static_cast<char>((u >> 16) & 0xff), static_cast<char>((u >> 24) & 0xff)};
  out.write(b, 4);
}

std::int32_t get_i32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw CorpusError("prepared dataset truncated");
  const std::uint32_t u = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  return static_cast<std::int32_t>(u);
}

TokenBatch trimmed(const std::vector<const TokenSeq*>& rows) {
  std::size_t len = 1;
  for (const TokenSeq* r : rows) {
    for (std::size_t i = r->size(); i > len; --i) {
      if ((*r)[i - 1] != kPadId) {
        len = i;
        break;
      }
    }
  }
  TokenBatch b;
  b.batch = rows.size();
  b.len = len;
  b.ids.reserve(rows.size() * len);
  for (const TokenSeq* r : rows) {
    for (std::size_t i = 0; i < len; ++i) b.ids.push_back(i < r->size() ? (*r)[i] : kPadId);
  }
  return b;
}

TokenBatch shifted(const TokenBatch& tgt) {
  TokenBatch d = tgt;
  for (std::size_t b = 0; b < tgt.batch; ++b) {
    const TokenSeq s = right_shift(tgt.row(b));
    std::copy(s.begin(), s.end(), d.ids.begin() + static_cast<std::ptrdiff_t>(b * tgt.len));
  }
  return d;
}

}  // namespace

std::vector<std::size_t> PreparedDataset::pool(Source s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (records[i].source == s) out.push_back(i);
  return out;
}

std::size_t PreparedDataset::count(Source s) const {
  return static_cast<std::size_t>(
      std::count_if(records.begin(), records.end(), [s](const PreparedRecord& r) { return r.source == s; }));
}

void write_prepared(std::ostream& out, const PreparedDataset& ds) {
  const nlohmann::json header{{"format", kFormat},
                              {"version", kVersion},
                              {"vocab", ds.vocab},
                              {"max_len", ds.max_len},
                              {"seed", ds.seed},
                              {"counts",
                               {{"movie", ds.count(Source::movie)},
                                {"therapy", ds.count(Source::therapy)},
                                {"total", ds.records.size()}}}};
  out << header.dump() << '\n';
  for (const PreparedRecord& r : ds.records) {
    if (r.prompt.size() != ds.max_len || r.response.size() != ds.max_len)
      throw CorpusError("prepared record length differs from max_len");
    out.put(r.source == Source::movie ? 0 : 1);
    for (TokenId id : r.prompt) put_i32(out, id);
    for (TokenId id : r.response) put_i32(out, id);
  }
  if (!out) throw CorpusError("failed writing prepared dataset");
}

PreparedDataset read_prepared(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw CorpusError("prepared dataset has no header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw CorpusError(std::string("prepared dataset header: ") + e.what());
  }
  if (header.value("format", "") != kFormat || header.value("version", 0) != kVersion)
    throw CorpusError("not a version 1 prepared dataset");
  PreparedDataset ds;
  ds.vocab = header.at("vocab").get<Vocab>();
  ds.max_len = header.at("max_len").get<std::size_t>();
  ds.seed = header.at("seed").get<std::uint64_t>();
  const auto total = header.at("counts").at("total").get<std::size_t>();
  ds.records.resize(total);
  for (PreparedRecord& r : ds.records) {
    const int tag = in.get();
    if (tag != 0 && tag != 1) throw CorpusError("prepared dataset record has a bad source tag");
    r.source = tag == 0 ? Source::movie : Source::therapy;
    r.prompt.resize(ds.max_len);
    r.response.resize(ds.max_len);
    for (TokenId& id : r.prompt) id = get_i32(in);
    for (TokenId& id : r.response) id = get_i32(in);
    for (const TokenSeq* s : {&r.prompt, &r.response})
      for (TokenId id : *s)
        if (id < 0 || static_cast<std::size_t>(id) >= ds.vocab.size())
          throw CorpusError("prepared dataset token id " + std::to_string(id) + " outside vocab");
  }
  if (in.peek() != std::char_traits<char>::eof()) throw CorpusError("prepared dataset has trailing bytes");
  return ds;
}

void save_prepared(const std::string& path, const PreparedDataset& ds) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CorpusError("cannot write " + tmp);
    write_prepared(out, ds);
  }
  std::filesystem::rename(tmp, path);
}

PreparedDataset load_prepared(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorpusError("cannot open prepared dataset " + path);
  return read_prepared(in);
}

void to_json(nlohmann::json& j, const PrepareConfig& c) {
  j = {{"movie_path", c.movie_path},       {"therapy_path", c.therapy_path}, {"greetings_path", c.greetings_path},
       {"vocab_cap", c.vocab_cap},         {"max_len_ceiling", c.max_len_ceiling},
       {"sigma", c.sigma},                 {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, PrepareConfig& c) {
  c.movie_path = j.value("movie_path", c.movie_path);
  c.therapy_path = j.value("therapy_path", c.therapy_path);
  c.greetings_path = j.value("greetings_path", c.greetings_path);
  c.vocab_cap = j.value("vocab_cap", c.vocab_cap);
  c.max_len_ceiling = j.value("max_len_ceiling", c.max_len_ceiling);
  c.sigma = j.value("sigma", c.sigma);
  c.seed = j.value("seed", c.seed);
}

PreparedDataset encode_pairs(std::span<const UtterancePair> pairs, const Vocab& vocab, std::size_t max_len,
                             std::uint64_t seed) {
  PreparedDataset ds;
  ds.vocab = vocab;
  ds.max_len = max_len;
  ds.seed = seed;
  ds.records.reserve(pairs.size());
  for (const UtterancePair& p : pairs)
    ds.records.push_back({p.source, encode_utterance(p.prompt, vocab, max_len),
                          encode_utterance(p.response, vocab, max_len)});
  return ds;
}

PreparedDataset prepare_dataset(const PrepareConfig& config, PrepareStats* stats) {
  PrepareStats local;
  PrepareStats& st = stats ? *stats : local;
  if (config.max_len_ceiling < 3) throw std::invalid_argument("max_len_ceiling must be at least 3");
  std::vector<UtterancePair> pairs = load_movie_corpus(config.movie_path, &st.movie);
  st.movie_pairs = pairs.size();
  if (!config.therapy_path.empty()) {
    const GreetingLexicon lex =
        config.greetings_path.empty() ? GreetingLexicon::builtin() : GreetingLexicon::load(config.greetings_path);
    auto therapy = load_therapy_csv(config.therapy_path, lex, token_overlap, &st.therapy);
    st.therapy_pairs = therapy.size();
    pairs.insert(pairs.end(), therapy.begin(), therapy.end());
  }
  if (pairs.empty()) throw CorpusError("no utterance pairs loaded");
  pairs = filter_rare_phrases(pairs, config.sigma);
  st.kept_pairs = pairs.size();
  const Vocab vocab = build_vocab(pairs, config.vocab_cap);
  std::size_t longest = 3;
  for (const auto& p : pairs)
    longest = std::max({longest, tokenize(p.prompt).size() + 2, tokenize(p.response).size() + 2});
  st.longest = longest;
  return encode_pairs(pairs, vocab, std::min(longest, config.max_len_ceiling), config.seed);
}

MiniBatch make_minibatch(const PreparedDataset& ds, std::span<const std::size_t> record_ids) {
  std::vector<const TokenSeq*> prompts, responses;
  for (std::size_t id : record_ids) {
    const PreparedRecord& r = ds.records.at(id);
    prompts.push_back(&r.prompt);
    responses.push_back(&r.response);
  }
  MiniBatch mb;
  mb.src = trimmed(prompts);
  mb.tgt = trimmed(responses);
  mb.dec_in = shifted(mb.tgt);
  return mb;
}

MiniBatch make_minibatch(const PreparedDataset& ds, std::span<const SampleRef> refs) {
  const auto movie = ds.pool(Source::movie);
  const auto therapy = ds.pool(Source::therapy);
  std::vector<std::size_t> ids;
  ids.reserve(refs.size());
  for (const SampleRef& r : refs) ids.push_back((r.source == Source::movie ? movie : therapy).at(r.index));
  return make_minibatch(ds, ids);
}

MiniBatch concat_minibatches(std::span<const MiniBatch> parts) {
  std::vector<TokenSeq> src, tgt;
  for (const MiniBatch& mb : parts) {
    for (std::size_t b = 0; b < mb.size(); ++b) {
      src.emplace_back(mb.src.row(b).begin(), mb.src.row(b).end());
      tgt.emplace_back(mb.tgt.row(b).begin(), mb.tgt.row(b).end());
    }
  }
  std::vector<const TokenSeq*> sp, tp;
  for (auto& s : src) sp.push_back(&s);
  for (auto& t : tgt) tp.push_back(&t);
  MiniBatch out;
  out.src = trimmed(sp);
  out.tgt = trimmed(tp);
  out.dec_in = shifted(out.tgt);
  return out;
}

}  // namespace psyt
