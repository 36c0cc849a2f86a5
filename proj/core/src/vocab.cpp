#include "skurg/vocab.hpp"

#include <sstream>
#include <stdexcept>

namespace skurg {

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string word;
  while (in >> word) out.push_back(word);
  return out;
}

std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

Vocabulary::Vocabulary() {
  for (const char* tok : {kPadToken, kClsToken, kAnsToken, kUnkToken, kEosToken}) {
    index_.emplace(tok, int(tokens_.size()));
    tokens_.emplace_back(tok);
  }
}

Vocabulary Vocabulary::from_words(const std::vector<std::string>& words) {
  Vocabulary v;
  for (const auto& w : words) v.add(w);
  return v;
}

int Vocabulary::add(const std::string& token) {
  if (token.empty()) throw std::invalid_argument("vocabulary: empty token");
  auto it = index_.find(token);
  if (it != index_.end()) return it->second;
  const int id = int(tokens_.size());
  index_.emplace(token, id);
  tokens_.push_back(token);
  return id;
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

std::vector<int> Vocabulary::encode_words(const std::vector<std::string>& words) const {
  std::vector<int> out;
  out.reserve(words.size());
  for (const auto& w : words) out.push_back(id(w));
  return out;
}

std::vector<int> Vocabulary::tokenize(const std::string& text) const {
  return encode_words(split_words(text));
}

std::string Vocabulary::decode(const std::vector<int>& ids, bool skip_special) const {
  std::vector<std::string> words;
  for (int id : ids) {
    if (skip_special && (id == kPad || id == kCls || id == kAns || id == kUnk || id == kEos))
      continue;
    words.push_back(token(id));
  }
  return join_words(words);
}

}  // namespace skurg
