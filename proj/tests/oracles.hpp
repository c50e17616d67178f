#pragma once

// Naive reference implementations of the ranking and AUC metrics.

#include <cmath>
#include <cstdint>
#include <vector>

#include "llmkt/metrics.hpp"
#include "llmkt/random.hpp"

namespace llmkt::oracle {

inline bool is_relevant(const RankedList& r, std::uint32_t item) {
  for (auto x : r.relevant) {
    if (x == item) return true;
  }
  return false;
}

inline double recall(const RankedList& r, std::size_t k) {
  double hits = 0;
  for (std::size_t pos = 0; pos < r.items.size() && pos < k; ++pos) hits += is_relevant(r, r.items[pos]) ? 1 : 0;
  return hits / static_cast<double>(r.relevant.size());
}

inline double hits(const RankedList& r, std::size_t k) { return recall(r, k) > 0 ? 1.0 : 0.0; }

inline double ndcg(const RankedList& r, std::size_t k) {
  double dcg = 0, idcg = 0;
  for (std::size_t pos = 1; pos <= r.items.size() && pos <= k; ++pos) {
    if (is_relevant(r, r.items[pos - 1])) dcg += std::log(2.0) / std::log(static_cast<double>(pos) + 1.0);
  }
  for (std::size_t pos = 1; pos <= r.relevant.size() && pos <= k; ++pos) idcg += std::log(2.0) / std::log(static_cast<double>(pos) + 1.0);
  return dcg / idcg;
}

// Enumerates every (positive, negative) pair.
inline double auc(const std::vector<double>& scores, const std::vector<double>& labels) {
  double credit = 0, pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1.0) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0.0) continue;
      pairs += 1;
      credit += scores[i] > scores[j] ? 1.0 : scores[i] == scores[j] ? 0.5 : 0.0;
    }
  }
  return credit / pairs;
}

// Random ranked list over at most 50 items with 1..10 relevant.
inline RankedList random_list(Rng& rng) {
  const std::size_t n = 1 + rng.below(50);
  RankedList r;
  r.user_id = "u";
  for (std::uint32_t i = 0; i < n; ++i) r.items.push_back(i);
  rng.shuffle(r.items.begin(), r.items.end());
  const std::size_t n_rel = 1 + rng.below(std::min<std::size_t>(10, n));
  std::vector<std::uint32_t> pool(r.items);
  rng.shuffle(pool.begin(), pool.end());
  for (std::size_t k = 0; k < n_rel; ++k) r.relevant.insert(pool[k]);
  // Sometimes a relevant item that was never ranked.
  if (rng.uniform() < 0.2) r.relevant.insert(static_cast<std::uint32_t>(n + 5));
  return r;
}

// Random scores with frequent ties and both classes present.
inline void random_auc_instance(Rng& rng, std::vector<double>& scores, std::vector<double>& labels) {
  const std::size_t n = 2 + rng.below(40);
  scores.assign(n, 0.0);
  labels.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    scores[i] = static_cast<double>(rng.below(8)) / 4.0;
    labels[i] = rng.uniform() < 0.4 ? 1.0 : 0.0;
  }
  labels[0] = 1.0;
  labels[1] = 0.0;
}

}  // namespace llmkt::oracle
