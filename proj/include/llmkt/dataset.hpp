#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "llmkt/error.hpp"
#include "llmkt/profile_store.hpp"
#include "llmkt/random.hpp"

namespace llmkt {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Bijection between opaque string ids and contiguous indices [0, n), assigned
// in first-appearance order.
class IdIndex {
 public:
  std::uint32_t add(const std::string& id) {
    auto [it, inserted] = index_.try_emplace(id, static_cast<std::uint32_t>(ids_.size()));
    if (inserted) ids_.push_back(id);
    return it->second;
  }
  std::optional<std::uint32_t> find(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  const std::string& id(std::uint32_t idx) const { return ids_.at(idx); }
  std::size_t size() const { return ids_.size(); }
  const std::vector<std::string>& ids() const { return ids_; }

 private:
  std::vector<std::string> ids_;
  std::unordered_map<std::string, std::uint32_t> index_;
};

struct Interaction {
  std::string user_id;
  std::string item_id;
  double rating = 0.0;
  std::int64_t timestamp = 0;
  // Filled in by InteractionTable.
  std::uint32_t user = 0;
  std::uint32_t item = 0;
};

struct InteractionTable {
  std::vector<Interaction> rows;
  IdIndex users;
  IdIndex items;

  // Appends a row, registering unseen ids.
  void add(Interaction r) {
    if (r.timestamp < 0) throw ValidationError("negative timestamp");
    if (!std::isfinite(r.rating)) throw ValidationError("non-finite rating");
    r.user = users.add(r.user_id);
    r.item = items.add(r.item_id);
    rows.push_back(std::move(r));
  }

  // Copy of the index maps with no rows.
  InteractionTable empty_like() const {
    InteractionTable t;
    t.users = users;
    t.items = items;
    return t;
  }

  std::size_t size() const { return rows.size(); }
  bool empty() const { return rows.empty(); }
  std::size_t n_users() const { return users.size(); }
  std::size_t n_items() const { return items.size(); }

  // Item indices each user interacted with, in row order (duplicates kept).
  std::vector<std::vector<std::uint32_t>> items_by_user() const {
    std::vector<std::vector<std::uint32_t>> out(n_users());
    for (const auto& r : rows) out[r.user].push_back(r.item);
    return out;
  }
};

struct SplitBundle {
  InteractionTable train;
  InteractionTable valid;
  InteractionTable test;
  std::array<double, 3> ratios{0.7, 0.1, 0.2};
};

struct DatasetStats {
  std::size_t n_users = 0;
  std::size_t n_items = 0;
  std::size_t n_interactions = 0;
  double sparsity_pct = 0.0;

  // The value as reported in tables: two decimals.
  double sparsity_rounded() const { return std::round(sparsity_pct * 100.0) / 100.0; }
};

struct LabeledExample {
  std::uint32_t user = 0;
  std::uint32_t item = 0;
  double label = 0.0;
};

struct NegativeSamples {
  std::vector<LabeledExample> examples;
  // Users that had interacted with every item and so got no negatives.
  std::size_t saturated_users = 0;
};

namespace detail {

inline std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find('\t', start);
    out.push_back(line.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::optional<double> parse_double(std::string_view s) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

// "user_id:token" -> "user_id"
inline std::string_view strip_type_suffix(std::string_view h) {
  auto pos = h.find(':');
  return pos == std::string_view::npos ? h : h.substr(0, pos);
}

}  // namespace detail

// Reads a tab-separated interactions file with header
// `user_id	item_id	rating	timestamp`. Typed headers such as
// `user_id:token` are accepted.
inline InteractionTable load_interactions(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open interactions file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw ParseError("missing header row", 1);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  static constexpr std::array<std::string_view, 4> kColumns{"user_id", "item_id", "rating", "timestamp"};
  auto header = detail::split_tabs(line);
  if (header.size() != 4) throw ParseError("header must have 4 tab-separated columns", 1);
  for (std::size_t i = 0; i < 4; ++i) {
    if (detail::strip_type_suffix(header[i]) != kColumns[i]) {
      throw ParseError("expected header column '" + std::string(kColumns[i]) + "', got '" +
                           std::string(header[i]) + "'",
                       1);
    }
  }

  InteractionTable table;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = detail::split_tabs(line);
    if (fields.size() != 4) {
      throw ParseError("expected 4 fields, got " + std::to_string(fields.size()), lineno);
    }
    auto rating = detail::parse_double(fields[2]);
    if (!rating || !std::isfinite(*rating)) throw ParseError("non-numeric rating '" + std::string(fields[2]) + "'", lineno);
    auto ts = detail::parse_double(fields[3]);
    if (!ts || !std::isfinite(*ts) || *ts < 0 || std::floor(*ts) != *ts) {
      throw ParseError("non-numeric timestamp '" + std::string(fields[3]) + "'", lineno);
    }
    table.add({std::string(fields[0]), std::string(fields[1]), *rating, static_cast<std::int64_t>(*ts)});
  }
  return table;
}

inline void write_interactions(const InteractionTable& table, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeFailure("cannot write interactions file: " + path);
  out << "user_id\titem_id\trating\ttimestamp\n";
  char buf[64];
  for (const auto& r : table.rows) {
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, r.rating);
    out << r.user_id << '\t' << r.item_id << '\t' << std::string_view(buf, end - buf) << '\t' << r.timestamp
        << '\n';
  }
  if (!out) throw RuntimeFailure("write failed: " + path);
}

// Cumulative cut index floor(fraction * n). The tolerance absorbs binary
// rounding in sums like 0.7 + 0.1.
inline std::size_t split_cut(double fraction, std::size_t n) {
  return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
}

// Stable sort by timestamp, then train/valid/test by cumulative floor cutoffs.
// The remainder goes to test.
inline SplitBundle temporal_split(const InteractionTable& table, std::array<double, 3> ratios) {
  if (table.empty()) throw ValidationError("cannot split an empty table");
  for (double r : ratios) {
    if (!(r > 0.0)) throw ValidationError("split ratios must be positive");
  }
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) {
    throw ValidationError("split ratios must sum to 1");
  }
  const std::size_t n = table.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return table.rows[a].timestamp < table.rows[b].timestamp;
  });
  const std::size_t cut1 = split_cut(ratios[0], n);
  const std::size_t cut2 = std::max(cut1, split_cut(ratios[0] + ratios[1], n));

  SplitBundle out{table.empty_like(), table.empty_like(), table.empty_like(), ratios};
  for (std::size_t k = 0; k < n; ++k) {
    auto& dst = k < cut1 ? out.train : (k < cut2 ? out.valid : out.test);
    dst.rows.push_back(table.rows[order[k]]);
  }
  return out;
}

// For each positive (u, i) in train order: the positive, then `ratio`
// negatives drawn uniformly (with replacement) from items u never touched in
// train.
inline NegativeSamples sample_negatives(const InteractionTable& train, std::size_t ratio, std::uint64_t seed) {
  if (ratio < 1) throw ValidationError("negative ratio must be >= 1");
  const std::size_t n_items = train.n_items();
  std::vector<std::vector<std::uint32_t>> seen = train.items_by_user();
  for (auto& s : seen) {
    std::sort(s.begin(), s.end());
    s.erase(std::unique(s.begin(), s.end()), s.end());
  }
  // Dense unseen lists only for users where rejection sampling would be slow.
  std::vector<std::vector<std::uint32_t>> unseen_lists(seen.size());
  std::vector<char> use_list(seen.size(), 0);
  for (std::size_t u = 0; u < seen.size(); ++u) {
    const std::size_t n_unseen = n_items - seen[u].size();
    if (n_unseen > 0 && n_unseen * 4 < n_items) {
      use_list[u] = 1;
      for (std::uint32_t i = 0; i < n_items; ++i) {
        if (!std::binary_search(seen[u].begin(), seen[u].end(), i)) unseen_lists[u].push_back(i);
      }
    }
  }

  Rng rng(seed, 0x6e6567);
  NegativeSamples out;
  out.examples.reserve(train.size() * (ratio + 1));
  std::vector<char> saturated(seen.size(), 0);
  for (const auto& r : train.rows) {
    out.examples.push_back({r.user, r.item, 1.0});
    const auto& s = seen[r.user];
    if (s.size() >= n_items) {
      saturated[r.user] = 1;
      continue;
    }
    for (std::size_t k = 0; k < ratio; ++k) {
      std::uint32_t item;
      if (use_list[r.user]) {
        const auto& list = unseen_lists[r.user];
        item = list[rng.below(list.size())];
      } else {
        do {
          item = static_cast<std::uint32_t>(rng.below(n_items));
        } while (std::binary_search(s.begin(), s.end(), item));
      }
      out.examples.push_back({r.user, item, 0.0});
    }
  }
  out.saturated_users = static_cast<std::size_t>(std::count(saturated.begin(), saturated.end(), 1));
  return out;
}

// label = 1 if rating >= threshold else 0, one example per row.
inline std::vector<LabeledExample> make_ctr_labels(const InteractionTable& table, double threshold) {
  std::vector<LabeledExample> out;
  out.reserve(table.size());
  for (const auto& r : table.rows) out.push_back({r.user, r.item, r.rating >= threshold ? 1.0 : 0.0});
  return out;
}

// Counts come from the index maps. With count_padding_id, one extra id is
// counted per side, matching toolkits that reserve index 0 for padding.
inline DatasetStats dataset_stats(const InteractionTable& table, bool count_padding_id = false) {
  if (table.empty()) throw ValidationError("cannot compute statistics of an empty table");
  DatasetStats s;
  const std::size_t pad = count_padding_id ? 1 : 0;
  s.n_users = table.n_users() + pad;
  s.n_items = table.n_items() + pad;
  s.n_interactions = table.size();
  s.sparsity_pct = 100.0 * (1.0 - static_cast<double>(s.n_interactions) /
                                      (static_cast<double>(s.n_users) * static_cast<double>(s.n_items)));
  s.sparsity_pct = std::clamp(s.sparsity_pct, 0.0, 100.0);
  return s;
}

struct SyntheticSpec {
  std::size_t n_users = 200;
  std::size_t n_items = 100;
  std::size_t latent_dim = 8;
  std::size_t profile_dim = 64;
  double profile_noise_sigma = 0.05;
  std::size_t interactions_per_user = 30;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_users < 1 || n_items < 1 || latent_dim < 1 || profile_dim < 1 || interactions_per_user < 1) {
      throw ValidationError("synthetic spec: all counts and dimensions must be >= 1");
    }
    if (latent_dim > profile_dim) throw ValidationError("synthetic spec: latent_dim must be <= profile_dim");
    if (!(profile_noise_sigma >= 0.0)) throw ValidationError("synthetic spec: profile_noise_sigma must be >= 0");
  }
};

struct SyntheticData {
  InteractionTable table;
  ProfileStore profiles;
  Matrix user_latents;  // n_users x latent_dim
  Matrix item_latents;  // n_items x latent_dim
};

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Planted-preference benchmark. Each user draws interactions_per_user distinct
// items with probability proportional to logistic(g_u . h_i) (weighted
// sampling without replacement); timestamps increase within a user.
inline SyntheticData gen_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed, 0x73796e);
  SyntheticData out;
  out.user_latents.resize(spec.n_users, spec.latent_dim);
  out.item_latents.resize(spec.n_items, spec.latent_dim);
  for (Eigen::Index u = 0; u < out.user_latents.rows(); ++u)
    for (Eigen::Index k = 0; k < out.user_latents.cols(); ++k) out.user_latents(u, k) = rng.normal();
  for (Eigen::Index i = 0; i < out.item_latents.rows(); ++i)
    for (Eigen::Index k = 0; k < out.item_latents.cols(); ++k) out.item_latents(i, k) = rng.normal();

  // Register every item up front so item indices match latent rows.
  for (std::size_t i = 0; i < spec.n_items; ++i) out.table.items.add("i" + std::to_string(i));

  const std::size_t per_user = std::min(spec.interactions_per_user, spec.n_items);
  std::vector<std::pair<double, std::uint32_t>> keys(spec.n_items);
  for (std::size_t u = 0; u < spec.n_users; ++u) {
    const std::string uid = "u" + std::to_string(u);
    for (std::size_t i = 0; i < spec.n_items; ++i) {
      const double w = logistic(out.user_latents.row(u).dot(out.item_latents.row(i)));
      double r;
      do {
        r = rng.uniform();
      } while (r <= 0.0);
      // Efraimidis-Spirakis key: largest r^(1/w) wins.
      keys[i] = {std::log(r) / w, static_cast<std::uint32_t>(i)};
    }
    std::partial_sort(keys.begin(), keys.begin() + per_user, keys.end(),
                      [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
    for (std::size_t k = 0; k < per_user; ++k) {
      const auto i = keys[k].second;
      const double p = logistic(out.user_latents.row(u).dot(out.item_latents.row(i)));
      out.table.add({uid, "i" + std::to_string(i), p >= 0.5 ? 5.0 : 2.0, static_cast<std::int64_t>(k)});
    }
  }

  out.profiles = ProfileStore(spec.profile_dim, "synthetic");
  for (std::size_t u = 0; u < spec.n_users; ++u) {
    std::vector<double> v(spec.profile_dim, 0.0);
    for (std::size_t k = 0; k < spec.latent_dim; ++k) v[k] = out.user_latents(u, k);
    if (spec.profile_noise_sigma > 0.0) {
      for (auto& x : v) x += spec.profile_noise_sigma * rng.normal();
    }
    out.profiles.add({"u" + std::to_string(u), std::move(v)});
  }
  return out;
}

}  // namespace llmkt
