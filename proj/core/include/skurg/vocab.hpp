#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace skurg {

// Whitespace word split; no other normalization.
std::vector<std::string> split_words(const std::string& text);
std::string join_words(const std::vector<std::string>& words);

// Word-level vocabulary. Ids are dense from 0 and the five special tokens are
// always present exactly once, at fixed ids.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kCls = 1;
  static constexpr int kAns = 2;
  static constexpr int kUnk = 3;
  static constexpr int kEos = 4;

  static constexpr const char* kPadToken = "[PAD]";
  static constexpr const char* kClsToken = "[CLS]";
  static constexpr const char* kAnsToken = "[ANS]";
  static constexpr const char* kUnkToken = "[UNK]";
  static constexpr const char* kEosToken = "[EOS]";

  Vocabulary();

  // Builds specials + the given words in order, skipping duplicates.
  static Vocabulary from_words(const std::vector<std::string>& words);

  int add(const std::string& token);  // returns existing id if present
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  int id(const std::string& token) const;  // kUnk when missing
  const std::string& token(int id) const { return tokens_.at(std::size_t(id)); }
  int size() const { return int(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

  std::vector<int> encode_words(const std::vector<std::string>& words) const;
  // Deterministic word-level tokenization; unknown words map to [UNK].
  std::vector<int> tokenize(const std::string& text) const;
  std::string decode(const std::vector<int>& ids, bool skip_special = true) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace skurg
