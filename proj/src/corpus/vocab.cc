#include "psyt/vocab.h"

#include <algorithm>
#include <map>
#include <stdexcept>

#include "psyt/text.h"

namespace psyt {

const std::vector<std::string> kReservedTokens{"<pad>", "<sos>", "<eos>", "<unk>"};

Vocab::Vocab() : Vocab(kReservedTokens) {}

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  if (tokens_.size() < kReservedTokens.size() ||
      !std::equal(kReservedTokens.begin(), kReservedTokens.end(), tokens_.begin())) {
    throw std::invalid_argument("vocab must start with <pad> <sos> <eos> <unk>");
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second)
      throw std::invalid_argument("vocab token '" + tokens_[i] + "' appears twice");
  }
}

TokenId Vocab::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnkId : it->second;
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocab of " + std::to_string(tokens_.size()));
  return tokens_[static_cast<std::size_t>(id)];
}

void to_json(nlohmann::json& j, const Vocab& v) { j = v.tokens(); }
void from_json(const nlohmann::json& j, Vocab& v) { v = Vocab(j.get<std::vector<std::string>>()); }

Vocab build_vocab(std::span<const UtterancePair> pairs, std::size_t cap) {
  std::map<std::string, std::size_t> counts;
  for (const auto& p : pairs) {
    for (auto& t : tokenize(p.prompt)) ++counts[std::move(t)];
    for (auto& t : tokenize(p.response)) ++counts[std::move(t)];
  }
  if (counts.empty()) throw std::invalid_argument("build_vocab: corpus has no tokens");
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens = kReservedTokens;
  for (std::size_t i = 0; i < ranked.size() && i < cap; ++i) tokens.push_back(ranked[i].first);
  return Vocab(std::move(tokens));
}

TokenSeq encode_utterance(const std::string& text, const Vocab& vocab, std::size_t max_len) {
  if (max_len < 3) throw std::invalid_argument("encode_utterance: max_len must be at least 3");
  TokenSeq out(max_len, kPadId);
  out[0] = kSosId;
  std::size_t pos = 1;
  for (const auto& t : tokenize(text)) {
    if (pos == max_len - 1) break;
    out[pos++] = vocab.id(t);
  }
  out[pos] = kEosId;
  return out;
}

std::vector<std::string> decode(std::span<const TokenId> seq, const Vocab& vocab) {
  std::vector<std::string> out;
  for (TokenId id : seq) {
    if (id == kEosId) break;
    if (id == kPadId || id == kSosId) continue;
    out.push_back(vocab.token(id));
  }
  return out;
}

TokenSeq right_shift(std::span<const TokenId> target) {
  if (target.empty()) throw std::invalid_argument("right_shift: empty sequence");
  TokenSeq out(target.size(), kPadId);
  std::copy(target.begin(), target.end() - 1, out.begin() + 1);
  return out;
}

}  // namespace psyt
