#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "llmkt/error.hpp"

namespace llmkt {

// Items ordered by descending score, plus the user's relevant (held-out) set.
struct RankedList {
  std::string user_id;
  std::vector<std::uint32_t> items;
  std::unordered_set<std::uint32_t> relevant;
};

struct MetricReport {
  std::string metric;
  std::size_t k = 0;  // 0 for metrics without a cutoff (auc)
  double value = 0.0;
  std::size_t n_users = 0;
  // Users with no relevant items, skipped from the mean.
  std::size_t n_skipped = 0;
};

namespace detail {

inline void check_ranked(const RankedList& r, std::size_t k) {
  if (k < 1) throw ValidationError("K must be >= 1");
  if (r.relevant.empty()) throw ValidationError("relevant set is empty for user '" + r.user_id + "'");
}

inline std::size_t hits_in_top(const RankedList& r, std::size_t k) {
  std::size_t hits = 0;
  const std::size_t n = std::min(k, r.items.size());
  for (std::size_t i = 0; i < n; ++i) hits += r.relevant.count(r.items[i]);
  return hits;
}

}  // namespace detail

inline double recall_at_k(const RankedList& r, std::size_t k) {
  detail::check_ranked(r, k);
  return static_cast<double>(detail::hits_in_top(r, k)) / static_cast<double>(r.relevant.size());
}

// Binary-relevance NDCG with the 1/log2(rank + 1) discount.
inline double ndcg_at_k(const RankedList& r, std::size_t k) {
  detail::check_ranked(r, k);
  double dcg = 0.0;
  const std::size_t n = std::min(k, r.items.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (r.relevant.count(r.items[i])) dcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
  }
  double idcg = 0.0;
  const std::size_t ideal = std::min(k, r.relevant.size());
  for (std::size_t j = 0; j < ideal; ++j) idcg += 1.0 / std::log2(static_cast<double>(j) + 2.0);
  return dcg / idcg;
}

inline double hits_at_k(const RankedList& r, std::size_t k) {
  detail::check_ranked(r, k);
  return detail::hits_in_top(r, k) > 0 ? 1.0 : 0.0;
}

// Probability that a random positive outscores a random negative, ties
// counted as one half. Computed from midranks in O(n log n).
inline double auc_roc(std::span<const double> scores, std::span<const double> labels) {
  if (scores.size() != labels.size()) throw DimensionError("auc_roc: scores and labels differ in length");
  std::size_t n_pos = 0;
  for (double l : labels) {
    if (l != 0.0 && l != 1.0) throw ValidationError("auc_roc: labels must be 0 or 1");
    n_pos += l == 1.0 ? 1 : 0;
  }
  const std::size_t n_neg = labels.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw ValidationError("auc_roc needs both positive and negative labels");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Sum of (1-based) midranks of positives.
  double pos_rank_sum = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t t = i; t <= j; ++t) {
      if (labels[order[t]] == 1.0) pos_rank_sum += midrank;
    }
    i = j + 1;
  }
  const double p = static_cast<double>(n_pos);
  const double q = static_cast<double>(n_neg);
  return (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * q);
}

// Neumaier-compensated running sum, so a mean does not drift with order or
// length.
class CompensatedSum {
 public:
  void add(double x) {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x)) {
      comp_ += (sum_ - t) + x;
    } else {
      comp_ += (x - t) + sum_;
    }
    sum_ = t;
  }
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

// Mean of a per-user ranking metric over lists with nonempty relevant sets.
template <typename MetricFn>
MetricReport aggregate(const std::string& name, std::span<const RankedList> lists, std::size_t k, MetricFn fn) {
  CompensatedSum acc;
  MetricReport rep{name, k, 0.0, 0, 0};
  for (const auto& l : lists) {
    if (l.relevant.empty()) {
      ++rep.n_skipped;
      continue;
    }
    acc.add(fn(l, k));
    ++rep.n_users;
  }
  rep.value = rep.n_users ? acc.value() / static_cast<double>(rep.n_users) : 0.0;
  return rep;
}

inline MetricReport ranking_metric(const std::string& name, std::span<const RankedList> lists, std::size_t k) {
  if (name == "recall") return aggregate(name, lists, k, recall_at_k);
  if (name == "ndcg") return aggregate(name, lists, k, ndcg_at_k);
  if (name == "hits") return aggregate(name, lists, k, hits_at_k);
  throw ValidationError("unknown ranking metric '" + name + "' (expected recall, ndcg or hits)");
}

inline const MetricReport* find_metric(const std::vector<MetricReport>& reports, const std::string& name, std::size_t k) {
  for (const auto& r : reports) {
    if (r.metric == name && r.k == k) return &r;
  }
  return nullptr;
}

// CSV with columns metric,K,value,n_users,run_id.
inline void write_metrics_csv(const std::vector<MetricReport>& reports, const std::string& run_id, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeFailure("cannot write metrics file: " + path);
  out << "metric,K,value,n_users,run_id\n";
  out.precision(17);
  for (const auto& r : reports) out << r.metric << ',' << r.k << ',' << r.value << ',' << r.n_users << ',' << run_id << '\n';
}

inline std::vector<MetricReport> read_metrics_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open metrics file: " + path);
  std::string line;
  std::getline(in, line);
  if (line.rfind("metric,K,value", 0) != 0) throw ParseError("unexpected metrics header", 1);
  std::vector<MetricReport> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    while (true) {
      auto pos = line.find(',', start);
      f.push_back(line.substr(start, pos - start));
      if (pos == std::string::npos) break;
      start = pos + 1;
    }
    if (f.size() < 4) throw ParseError("expected at least 4 columns", lineno);
    try {
      out.push_back({f[0], std::stoul(f[1]), std::stod(f[2]), std::stoul(f[3]), 0});
    } catch (const std::exception&) {
      throw ParseError("malformed metrics row", lineno);
    }
  }
  return out;
}

}  // namespace llmkt
