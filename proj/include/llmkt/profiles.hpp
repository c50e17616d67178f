#pragma once

#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "llmkt/dataset.hpp"
#include "llmkt/error.hpp"
#include "llmkt/profile_store.hpp"
#include "llmkt/random.hpp"

namespace llmkt {

// ---- prompts -------------------------------------------------------------------

struct PromptTemplate {
  static constexpr std::string_view kHistoryPlaceholder = "{history}";

  std::string template_id;
  std::string body;

  void validate() const {
    if (template_id.empty()) throw ValidationError("prompt template needs an id");
    const auto first = body.find(kHistoryPlaceholder);
    if (first == std::string::npos) throw ValidationError("prompt template '" + template_id + "' is missing the {history} placeholder");
    if (body.find(kHistoryPlaceholder, first + 1) != std::string::npos) {
      throw ValidationError("prompt template '" + template_id + "' has more than one {history} placeholder");
    }
  }

  static PromptTemplate default_template() {
    return {"default",
            "Based on the user's ratings, provide a general summary of their preferences, paying attention to "
            "genres, eras, and themes. The response should be organized into several parts: genres, themes, "
            "eras.\n\nThe user's ratings:\n{history}\n"};
  }
};

inline std::string format_rating(double r) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, r);
  return std::string(buf, end);
}

// Replaces the placeholder with one `title: rating` line per history entry.
inline std::string render_prompt(const PromptTemplate& tpl, const std::vector<std::pair<std::string, double>>& history) {
  tpl.validate();
  if (history.empty()) throw ValidationError("empty history");
  std::string lines;
  for (std::size_t i = 0; i < history.size(); ++i) {
    if (i) lines += '\n';
    lines += history[i].first + ": " + format_rating(history[i].second);
  }
  std::string out = tpl.body;
  out.replace(out.find(PromptTemplate::kHistoryPlaceholder), PromptTemplate::kHistoryPlaceholder.size(), lines);
  return out;
}

// ---- clients ---------------------------------------------------------------------

class ClientError : public RuntimeFailure {
 public:
  ClientError(const std::string& what, bool transient) : RuntimeFailure(what), transient_(transient) {}
  bool transient() const { return transient_; }

 private:
  bool transient_;
};

// Implementations must be safe to call from several threads at once.
class LlmClient {
 public:
  virtual ~LlmClient() = default;
  virtual std::string id() const = 0;
  virtual std::string complete(const std::string& prompt) const = 0;
};

class EmbeddingClient {
 public:
  virtual ~EmbeddingClient() = default;
  virtual std::string id() const = 0;
  virtual std::size_t dim() const = 0;
  virtual std::vector<double> embed(const std::string& text) const = 0;
};

// Offline stand-in for an LLM: a deterministic pseudo-profile that names the
// highest-rated title found in the prompt's `title: rating` lines.
class StubLlmClient final : public LlmClient {
 public:
  explicit StubLlmClient(std::uint64_t seed = 0) : seed_(seed) {}
  std::string id() const override { return "stub"; }

  std::string complete(const std::string& prompt) const override {
    std::string top;
    double best = -std::numeric_limits<double>::infinity();
    std::size_t start = 0;
    while (start <= prompt.size()) {
      auto end = prompt.find('\n', start);
      if (end == std::string::npos) end = prompt.size();
      const std::string_view line(prompt.data() + start, end - start);
      const auto colon = line.rfind(": ");
      if (colon != std::string_view::npos && colon > 0) {
        const auto num = line.substr(colon + 2);
        if (auto v = detail::parse_double(num); v && *v > best) {
          best = *v;
          top = std::string(line.substr(0, colon));
        }
      }
      start = end + 1;
    }
    if (top.empty()) top = "a varied selection";
    static constexpr std::string_view kGenres[] = {"drama", "comedy", "science fiction", "thrillers", "documentaries",
                                                   "animation", "romance", "action", "horror", "jazz"};
    static constexpr std::string_view kThemes[] = {"redemption", "friendship", "identity", "survival", "ambition",
                                                   "nostalgia", "rebellion", "family"};
    static constexpr std::string_view kEras[] = {"the 1960s", "the 1970s", "the 1980s", "the 1990s", "the 2000s",
                                                 "recent years"};
    Rng rng(seed_, fnv1a64(prompt));
    std::string out = "It seems that you enjoy titles like " + top + ". Genres: ";
    out += std::string(kGenres[rng.below(std::size(kGenres))]) + " and " + std::string(kGenres[rng.below(std::size(kGenres))]);
    out += ". Themes: " + std::string(kThemes[rng.below(std::size(kThemes))]);
    out += ". Eras: " + std::string(kEras[rng.below(std::size(kEras))]) + ".";
    return out;
  }

 private:
  std::uint64_t seed_;
};

// Offline stand-in for a text-embedding service: a unit-norm Gaussian vector
// seeded by a hash of the text.
class StubEmbeddingClient final : public EmbeddingClient {
 public:
  explicit StubEmbeddingClient(std::size_t dim = 64, std::uint64_t seed = 0) : dim_(dim), seed_(seed) {
    if (dim_ == 0) throw ValidationError("embedding dimension must be positive");
  }
  std::string id() const override { return "stub-" + std::to_string(dim_); }
  std::size_t dim() const override { return dim_; }

  std::vector<double> embed(const std::string& text) const override {
    Rng rng(seed_, fnv1a64(text));
    std::vector<double> v(dim_);
    double norm2 = 0.0;
    for (auto& x : v) {
      x = rng.normal();
      norm2 += x * x;
    }
    const double inv = 1.0 / std::sqrt(norm2);
    for (auto& x : v) x *= inv;
    return v;
  }

 private:
  std::size_t dim_;
  std::uint64_t seed_;
};

// ---- caches ------------------------------------------------------------------------

// Generated profile texts keyed by (user_id, template_id, generator_id). With
// a backing file, each insertion is appended as one JSON line under a lock.
class ProfileCache {
 public:
  ProfileCache() = default;
  explicit ProfileCache(std::string path) : path_(std::move(path)) {
    std::ifstream in(path_, std::ios::binary);
    std::string line;
    while (in && std::getline(in, line)) {
      if (line.empty()) continue;
      try {
        auto j = nlohmann::json::parse(line);
        UserProfile p{ProfileStore::json_id(j.at("user_id")), j.at("text").get<std::string>(),
                      j.at("template_id").get<std::string>(), j.at("generator_id").get<std::string>()};
        entries_[{p.user_id, p.template_id, p.generator_id}] = p;
      } catch (const nlohmann::json::exception&) {
        // A torn last line from an interrupted run is ignored.
      }
    }
  }

  std::optional<UserProfile> find(const std::string& user, const std::string& tpl, const std::string& gen) const {
    std::lock_guard lock(mu_);
    auto it = entries_.find({user, tpl, gen});
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }

  void put(const UserProfile& p) {
    std::lock_guard lock(mu_);
    entries_[{p.user_id, p.template_id, p.generator_id}] = p;
    if (!path_.empty()) {
      std::ofstream out(path_, std::ios::binary | std::ios::app);
      out << ProfileStore::profile_to_json(p).dump() << '\n';
    }
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return entries_.size();
  }

 private:
  std::string path_;
  mutable std::mutex mu_;
  std::map<std::tuple<std::string, std::string, std::string>, UserProfile> entries_;
};

// Embeddings keyed by (embedder id, text).
class EmbeddingCache {
 public:
  EmbeddingCache() = default;
  explicit EmbeddingCache(std::string path) : path_(std::move(path)) {
    std::ifstream in(path_, std::ios::binary);
    std::string line;
    while (in && std::getline(in, line)) {
      if (line.empty()) continue;
      try {
        auto j = nlohmann::json::parse(line);
        entries_[{j.at("embedder").get<std::string>(), j.at("text").get<std::string>()}] =
            j.at("vector").get<std::vector<double>>();
      } catch (const nlohmann::json::exception&) {
      }
    }
  }

  std::optional<std::vector<double>> find(const std::string& embedder, const std::string& text) const {
    std::lock_guard lock(mu_);
    auto it = entries_.find({embedder, text});
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }

  void put(const std::string& embedder, const std::string& text, const std::vector<double>& v) {
    std::lock_guard lock(mu_);
    entries_[{embedder, text}] = v;
    if (!path_.empty()) {
      std::ofstream out(path_, std::ios::binary | std::ios::app);
      out << nlohmann::json{{"embedder", embedder}, {"text", text}, {"vector", v}}.dump() << '\n';
    }
  }

 private:
  std::string path_;
  mutable std::mutex mu_;
  std::map<std::pair<std::string, std::string>, std::vector<double>> entries_;
};

// ---- generation -------------------------------------------------------------------

struct RetryPolicy {
  int attempts = 3;
  std::chrono::milliseconds base_delay{200};  // doubles after each failure
};

// Counters for client requests actually issued (cache hits excluded).
struct CallCounter {
  std::atomic<std::size_t> llm{0};
  std::atomic<std::size_t> embed{0};
};

namespace detail {

template <typename Fn>
auto with_retries(const RetryPolicy& policy, const std::string& user_id, Fn&& fn) {
  const int attempts = std::max(1, policy.attempts);
  for (int a = 1;; ++a) {
    try {
      return fn();
    } catch (const ClientError& e) {
      if (!e.transient()) throw RuntimeFailure("user '" + user_id + "': " + e.what());
      if (a >= attempts) {
        throw RuntimeFailure("user '" + user_id + "': gave up after " + std::to_string(attempts) + " attempts: " + e.what());
      }
      std::this_thread::sleep_for(policy.base_delay * (1 << (a - 1)));
    }
  }
}

}  // namespace detail

inline UserProfile generate_profile(const LlmClient& client, const std::string& user_id, const std::string& prompt,
                                    const std::string& template_id = "default", ProfileCache* cache = nullptr,
                                    const RetryPolicy& retry = {}, CallCounter* counter = nullptr) {
  if (cache) {
    if (auto hit = cache->find(user_id, template_id, client.id())) return *hit;
  }
  std::string text = detail::with_retries(retry, user_id, [&] {
    if (counter) ++counter->llm;
    return client.complete(prompt);
  });
  if (text.empty()) throw RuntimeFailure("user '" + user_id + "': empty profile");
  UserProfile p{user_id, std::move(text), template_id, client.id()};
  if (cache) cache->put(p);
  return p;
}

// Embeds one text. When `store` is given, the vector's dimension must match
// it.
inline ProfileEmbedding embed_profile(const EmbeddingClient& client, const std::string& user_id, const std::string& text,
                                      const ProfileStore* store = nullptr, EmbeddingCache* cache = nullptr,
                                      const RetryPolicy& retry = {}, CallCounter* counter = nullptr) {
  if (text.empty()) throw ValidationError("cannot embed empty text for user '" + user_id + "'");
  std::vector<double> v;
  if (cache) {
    if (auto hit = cache->find(client.id(), text)) v = std::move(*hit);
  }
  if (v.empty()) {
    v = detail::with_retries(retry, user_id, [&] {
      if (counter) ++counter->embed;
      return client.embed(text);
    });
    if (v.size() != client.dim()) {
      throw DimensionError("embedder '" + client.id() + "' returned " + std::to_string(v.size()) +
                           " components, advertised " + std::to_string(client.dim()));
    }
    if (cache) cache->put(client.id(), text, v);
  }
  if (store && store->dim() != 0 && v.size() != store->dim()) {
    throw DimensionError("dimension mismatch: store has " + std::to_string(store->dim()) + ", embedding has " +
                         std::to_string(v.size()));
  }
  return {user_id, std::move(v)};
}

// The (title, rating) history of every user in row order. Titles default to
// item ids.
inline std::vector<std::vector<std::pair<std::string, double>>> user_histories(
    const InteractionTable& table, const std::unordered_map<std::string, std::string>& titles = {}) {
  std::vector<std::vector<std::pair<std::string, double>>> out(table.n_users());
  for (const auto& r : table.rows) {
    auto it = titles.find(r.item_id);
    out[r.user].emplace_back(it == titles.end() ? r.item_id : it->second, r.rating);
  }
  return out;
}

// Optional `item_id<TAB>title` file.
inline std::unordered_map<std::string, std::string> load_item_titles(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open item titles file: " + path);
  std::unordered_map<std::string, std::string> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError("expected item_id<TAB>title", lineno);
    out[line.substr(0, tab)] = line.substr(tab + 1);
  }
  return out;
}

struct BuildOptions {
  RetryPolicy retry;
  std::size_t max_in_flight = 4;
  ProfileCache* profile_cache = nullptr;
  EmbeddingCache* embedding_cache = nullptr;
  std::unordered_map<std::string, std::string> item_titles;
  std::string profiles_path;    // persisted when nonempty
  std::string embeddings_path;  // persisted when nonempty
};

struct BuildResult {
  ProfileStore store;
  std::vector<std::string> skipped;  // user ids that failed
  std::vector<std::string> errors;   // one message per skipped user
  std::size_t llm_calls = 0;
  std::size_t embed_calls = 0;
};

namespace detail {

// Runs fn(i) for i in [0, n) on up to `workers` threads.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  std::atomic<std::size_t> next{0};
  auto loop = [&] {
    for (std::size_t i = next++; i < n; i = next++) fn(i);
  };
  if (workers == 1) {
    loop();
    return;
  }
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(loop);
  for (auto& t : pool) t.join();
}

struct Slot {
  std::optional<UserProfile> profile;
  std::optional<ProfileEmbedding> embedding;
  std::string error;
};

// Per-user work shared by the entry points below. Results land in slot order,
// so the output does not depend on completion order.
inline std::vector<Slot> run_users(const InteractionTable& table, const LlmClient& llm, const EmbeddingClient* embedder,
                                   const PromptTemplate& tpl, const BuildOptions& opts, CallCounter& counter) {
  tpl.validate();
  const auto histories = user_histories(table, opts.item_titles);
  std::vector<Slot> slots(histories.size());
  parallel_for(histories.size(), opts.max_in_flight, [&](std::size_t u) {
    const std::string& uid = table.users.id(static_cast<std::uint32_t>(u));
    try {
      const std::string prompt = render_prompt(tpl, histories[u]);
      UserProfile p = generate_profile(llm, uid, prompt, tpl.template_id, opts.profile_cache, opts.retry, &counter);
      if (embedder) slots[u].embedding = embed_profile(*embedder, uid, p.text, nullptr, opts.embedding_cache, opts.retry, &counter);
      slots[u].profile = std::move(p);
    } catch (const Error& e) {
      slots[u].error = "user '" + uid + "': " + e.what();
    }
  });
  return slots;
}

}  // namespace detail

// Profile texts for every user of `table` (no embeddings). The result's store
// carries texts only.
inline BuildResult generate_profiles(const InteractionTable& table, const LlmClient& llm, const PromptTemplate& tpl,
                                     const BuildOptions& opts = {}) {
  CallCounter counter;
  auto slots = detail::run_users(table, llm, nullptr, tpl, opts, counter);
  BuildResult out;
  for (std::size_t u = 0; u < slots.size(); ++u) {
    if (slots[u].profile) {
      out.store.add_text(std::move(*slots[u].profile));
    } else {
      out.skipped.push_back(table.users.id(static_cast<std::uint32_t>(u)));
      out.errors.push_back(slots[u].error);
    }
  }
  out.llm_calls = counter.llm;
  if (!slots.empty() && out.skipped.size() == slots.size()) {
    throw RuntimeFailure("profile generation failed for all " + std::to_string(slots.size()) + " users; first error: " + out.errors.front());
  }
  if (!opts.profiles_path.empty()) out.store.save_profiles(opts.profiles_path);
  return out;
}

// One profile and embedding per user of `table`, with up to max_in_flight
// users processed at once. Users that fail are skipped and reported.
inline BuildResult build_profile_store(const InteractionTable& table, const LlmClient& llm, const EmbeddingClient& embedder,
                                       const PromptTemplate& tpl, const BuildOptions& opts = {}) {
  CallCounter counter;
  auto slots = detail::run_users(table, llm, &embedder, tpl, opts, counter);
  BuildResult out;
  out.store = ProfileStore(embedder.dim(), embedder.id());
  for (std::size_t u = 0; u < slots.size(); ++u) {
    if (slots[u].profile) {
      out.store.add(std::move(*slots[u].embedding));
      out.store.add_text(std::move(*slots[u].profile));
    } else {
      out.skipped.push_back(table.users.id(static_cast<std::uint32_t>(u)));
      out.errors.push_back(slots[u].error);
    }
  }
  out.llm_calls = counter.llm;
  out.embed_calls = counter.embed;
  if (!slots.empty() && out.store.empty()) {
    throw RuntimeFailure("profile generation failed for all " + std::to_string(slots.size()) + " users; first error: " + out.errors.front());
  }
  if (!opts.profiles_path.empty()) out.store.save_profiles(opts.profiles_path);
  if (!opts.embeddings_path.empty()) out.store.save_embeddings(opts.embeddings_path);
  return out;
}

// Embeds previously generated profiles.
inline BuildResult embed_profiles(const std::vector<UserProfile>& profiles, const EmbeddingClient& embedder,
                                  const BuildOptions& opts = {}) {
  CallCounter counter;
  std::vector<detail::Slot> slots(profiles.size());
  detail::parallel_for(profiles.size(), opts.max_in_flight, [&](std::size_t i) {
    try {
      slots[i].embedding = embed_profile(embedder, profiles[i].user_id, profiles[i].text, nullptr, opts.embedding_cache, opts.retry, &counter);
    } catch (const Error& e) {
      slots[i].error = "user '" + profiles[i].user_id + "': " + e.what();
    }
  });
  BuildResult out;
  out.store = ProfileStore(embedder.dim(), embedder.id());
  for (std::size_t i = 0; i < profiles.size(); ++i) {
    if (slots[i].embedding) {
      out.store.add(std::move(*slots[i].embedding));
      out.store.add_text(profiles[i]);
    } else {
      out.skipped.push_back(profiles[i].user_id);
      out.errors.push_back(slots[i].error);
    }
  }
  out.embed_calls = counter.embed;
  if (!profiles.empty() && out.store.empty()) throw RuntimeFailure("embedding failed for every profile; first error: " + out.errors.front());
  if (!opts.embeddings_path.empty()) out.store.save_embeddings(opts.embeddings_path);
  return out;
}

}  // namespace llmkt
