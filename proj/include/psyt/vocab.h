#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "psyt/corpus.h"
#include "psyt/tokens.h"

namespace psyt {

inline constexpr std::size_t kDefaultVocabCap = 15000;

class Vocab {
 public:
  Vocab();  // reserved tokens only
  explicit Vocab(std::vector<std::string> tokens);  // tokens[0..3] must be the reserved names

  TokenId id(const std::string& token) const;  // unk when absent
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  const std::string& token(TokenId id) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  bool operator==(const Vocab& o) const { return tokens_ == o.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

extern const std::vector<std::string> kReservedTokens;  // <pad> <sos> <eos> <unk>

void to_json(nlohmann::json& j, const Vocab& v);
void from_json(const nlohmann::json& j, Vocab& v);

// Most frequent `cap` tokens of all prompts and responses, ties broken by
// byte-wise token order, placed after the reserved ids.
Vocab build_vocab(std::span<const UtterancePair> pairs, std::size_t cap = kDefaultVocabCap);

// [sos] ids... [eos] then pads up to max_len; the word list is cut to
// max_len - 2 so eos is always the last non-pad token.
TokenSeq encode_utterance(const std::string& text, const Vocab& vocab, std::size_t max_len);
// Tokens between sos and the first eos (or end), pads skipped.
std::vector<std::string> decode(std::span<const TokenId> seq, const Vocab& vocab);

TokenSeq right_shift(std::span<const TokenId> target);

}  // namespace psyt
