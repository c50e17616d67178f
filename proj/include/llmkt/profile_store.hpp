#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "llmkt/error.hpp"

namespace llmkt {

struct UserProfile {
  std::string user_id;
  std::string text;
  std::string template_id;
  std::string generator_id;
};

struct ProfileEmbedding {
  std::string user_id;
  std::vector<double> vector;
};

// Per-user profile embeddings P_u (and optionally the profile texts they were
// computed from). Entries keep insertion order so persisted files are stable.
class ProfileStore {
 public:
  ProfileStore() = default;
  explicit ProfileStore(std::size_t dim, std::string embedder = "")
      : dim_(dim), embedder_(std::move(embedder)) {}

  std::size_t dim() const { return dim_; }
  const std::string& embedder() const { return embedder_; }
  void set_embedder(std::string e) { embedder_ = std::move(e); }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  // A store created with dim 0 adopts the dimension of its first entry.
  void add(ProfileEmbedding e) {
    if (e.vector.empty()) throw DimensionError("empty embedding for user '" + e.user_id + "'");
    if (dim_ == 0) dim_ = e.vector.size();
    if (e.vector.size() != dim_) {
      throw DimensionError("dimension mismatch: store has " + std::to_string(dim_) +
                           ", embedding for user '" + e.user_id + "' has " +
                           std::to_string(e.vector.size()));
    }
    for (double v : e.vector) {
      if (!std::isfinite(v)) throw ValidationError("non-finite embedding for user '" + e.user_id + "'");
    }
    auto it = index_.find(e.user_id);
    if (it != index_.end()) {
      entries_[it->second] = std::move(e);
      return;
    }
    index_.emplace(e.user_id, entries_.size());
    entries_.push_back(std::move(e));
  }

  // nullptr on a miss; absent users are not an error.
  const std::vector<double>* find(const std::string& user_id) const {
    auto it = index_.find(user_id);
    return it == index_.end() ? nullptr : &entries_[it->second].vector;
  }
  bool contains(const std::string& user_id) const { return index_.count(user_id) > 0; }

  const std::vector<ProfileEmbedding>& entries() const { return entries_; }

  void add_text(UserProfile p) { texts_[p.user_id] = std::move(p); }
  const UserProfile* find_text(const std::string& user_id) const {
    auto it = texts_.find(user_id);
    return it == texts_.end() ? nullptr : &it->second;
  }
  const std::unordered_map<std::string, UserProfile>& texts() const { return texts_; }

  // Embeddings file: first line is {"dim": d, "embedder": name}, then one
  // {"user_id": ..., "vector": [...]} object per line.
  void save_embeddings(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw RuntimeFailure("cannot write embeddings file: " + path);
    out << nlohmann::json{{"dim", dim_}, {"embedder", embedder_}}.dump() << '\n';
    for (const auto& e : entries_) {
      out << nlohmann::json{{"user_id", e.user_id}, {"vector", e.vector}}.dump() << '\n';
    }
    if (!out) throw RuntimeFailure("write failed: " + path);
  }

  static ProfileStore load_embeddings(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open embeddings file: " + path);
    std::string line;
    std::size_t lineno = 0;
    std::optional<ProfileStore> store;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("invalid JSON: ") + e.what(), lineno);
      }
      if (!store) {
        if (!j.contains("dim")) throw ParseError("first line must be the {\"dim\", \"embedder\"} metadata", lineno);
        store.emplace(j.at("dim").get<std::size_t>(), j.value("embedder", std::string{}));
        if (store->dim() == 0) throw ParseError("dim must be positive", lineno);
        continue;
      }
      if (!j.contains("user_id") || !j.contains("vector")) throw ParseError("expected user_id and vector", lineno);
      ProfileEmbedding e{json_id(j.at("user_id")), j.at("vector").get<std::vector<double>>()};
      if (e.vector.size() != store->dim()) {
        throw ParseError("vector length " + std::to_string(e.vector.size()) + " != declared dim " +
                             std::to_string(store->dim()),
                         lineno);
      }
      store->add(std::move(e));
    }
    if (!store) throw ValidationError("embeddings file has no metadata line: " + path);
    return std::move(*store);
  }

  void save_profiles(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw RuntimeFailure("cannot write profiles file: " + path);
    // texts_ is unordered; emit in embedding order first, then the rest sorted.
    std::vector<const UserProfile*> order;
    for (const auto& e : entries_) {
      if (auto* p = find_text(e.user_id)) order.push_back(p);
    }
    std::vector<const UserProfile*> rest;
    for (const auto& [id, p] : texts_) {
      if (!contains(id)) rest.push_back(&p);
    }
    std::sort(rest.begin(), rest.end(), [](auto* a, auto* b) { return a->user_id < b->user_id; });
    order.insert(order.end(), rest.begin(), rest.end());
    for (const auto* p : order) out << profile_to_json(*p).dump() << '\n';
  }

  static nlohmann::json profile_to_json(const UserProfile& p) {
    return {{"user_id", p.user_id}, {"text", p.text}, {"template_id", p.template_id},
            {"generator_id", p.generator_id}};
  }

  static std::vector<UserProfile> load_profiles(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open profiles file: " + path);
    std::vector<UserProfile> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      try {
        auto j = nlohmann::json::parse(line);
        out.push_back({json_id(j.at("user_id")), j.at("text").get<std::string>(),
                       j.at("template_id").get<std::string>(), j.at("generator_id").get<std::string>()});
      } catch (const nlohmann::json::exception& e) {
        throw ParseError(e.what(), lineno);
      }
    }
    return out;
  }

  // Ids may be written as numbers by other tools.
  static std::string json_id(const nlohmann::json& j) {
    if (j.is_string()) return j.get<std::string>();
    return j.dump();
  }

 private:
  std::size_t dim_ = 0;
  std::string embedder_;
  std::vector<ProfileEmbedding> entries_;
  std::unordered_map<std::string, std::size_t> index_;
  std::unordered_map<std::string, UserProfile> texts_;
};

}  // namespace llmkt
