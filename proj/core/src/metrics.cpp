#include "skurg/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <set>
#include <sstream>

namespace skurg {

namespace {

bool is_punct(char c) { return std::ispunct(static_cast<unsigned char>(c)) != 0; }

std::vector<std::string> normalized_tokens(const std::string& text) {
  std::string lowered;
  lowered.reserve(text.size());
  for (char c : text) lowered.push_back(char(std::tolower(static_cast<unsigned char>(c))));
  std::istringstream in(lowered);
  std::vector<std::string> out;
  std::string word;
  while (in >> word) out.push_back(word);
  return out;
}

}  // namespace

std::string normalize_answer(const std::string& text) {
  auto words = normalized_tokens(text);
  std::string joined;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) joined += ' ';
    joined += words[i];
  }
  std::size_t begin = 0, end = joined.size();
  while (begin < end && is_punct(joined[begin])) ++begin;
  while (end > begin && is_punct(joined[end - 1])) --end;
  std::string stripped = joined.substr(begin, end - begin);
  // stripping may expose surrounding whitespace
  while (!stripped.empty() && stripped.front() == ' ') stripped.erase(stripped.begin());
  while (!stripped.empty() && stripped.back() == ' ') stripped.pop_back();
  return stripped;
}

int exact_match(const std::string& prediction, const std::string& gold) {
  return normalize_answer(prediction) == normalize_answer(gold) ? 1 : 0;
}

double token_f1(const std::string& prediction, const std::string& gold) {
  auto pred = normalized_tokens(normalize_answer(prediction));
  auto ref = normalized_tokens(normalize_answer(gold));
  if (pred.empty() && ref.empty()) return 1.0;
  if (pred.empty() || ref.empty()) return 0.0;
  std::map<std::string, int> counts;
  for (const auto& w : ref) ++counts[w];
  int common = 0;
  for (const auto& w : pred) {
    auto it = counts.find(w);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  }
  if (common == 0) return 0.0;
  const double precision = double(common) / double(pred.size());
  const double recall = double(common) / double(ref.size());
  return 2.0 * precision * recall / (precision + recall);
}

RetrievalPrf retrieval_prf(const std::vector<std::string>& predicted_ids,
                           const std::vector<std::string>& gold_ids) {
  std::set<std::string> pred(predicted_ids.begin(), predicted_ids.end());
  std::set<std::string> gold(gold_ids.begin(), gold_ids.end());
  RetrievalPrf out;
  if (pred.empty() && gold.empty()) {
    out.precision = out.recall = out.f1 = 1.0;
    return out;
  }
  std::size_t common = 0;
  for (const auto& id : pred) common += gold.count(id);
  out.precision = pred.empty() ? 0.0 : double(common) / double(pred.size());
  out.recall = gold.empty() ? 0.0 : double(common) / double(gold.size());
  out.f1 = (out.precision + out.recall) > 0
               ? 2.0 * out.precision * out.recall / (out.precision + out.recall)
               : 0.0;
  return out;
}

}  // namespace skurg
