#pragma once

#include <string>
#include <vector>

namespace skurg {

// Lowercase, collapse whitespace, strip surrounding punctuation.
std::string normalize_answer(const std::string& text);

// 1 iff the normalized strings are equal.
int exact_match(const std::string& prediction, const std::string& gold);

// Bag-of-tokens F1 over normalized words. Both empty -> 1, exactly one empty -> 0.
double token_f1(const std::string& prediction, const std::string& gold);

struct RetrievalPrf {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
};

// Set precision/recall/F1 over ids (order-insensitive, duplicates ignored).
// Empty prediction and empty gold count as a perfect match.
RetrievalPrf retrieval_prf(const std::vector<std::string>& predicted_ids,
                           const std::vector<std::string>& gold_ids);

}  // namespace skurg
