#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "llmkt/dataset.hpp"
#include "llmkt/error.hpp"
#include "llmkt/metrics.hpp"
#include "llmkt/models.hpp"
#include "llmkt/profile_store.hpp"
#include "llmkt/trainer.hpp"
#include "llmkt/transfer.hpp"
#include "llmkt/wrapper.hpp"

namespace llmkt {

namespace fs = std::filesystem;

// A config value with the wrong type or range.
class SchemaError : public ValidationError {
 public:
  SchemaError(std::string field, std::string expected, std::string got)
      : ValidationError("field '" + field + "': expected " + expected + ", got " + got),
        field_(std::move(field)),
        expected_(std::move(expected)),
        got_(std::move(got)) {}
  const std::string& field() const { return field_; }
  const std::string& expected() const { return expected_; }
  const std::string& got() const { return got_; }

 private:
  std::string field_, expected_, got_;
};

namespace detail {

// Typed, range-checked reads from one JSON object. finish() rejects any key
// that was never read.
class Fields {
 public:
  Fields(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw SchemaError(path_.empty() ? "<root>" : path_, "an object", j_.dump());
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const nlohmann::json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  double number(const std::string& key, double def, double lo = -HUGE_VAL, double hi = HUGE_VAL, bool lo_open = false) {
    if (!has(key)) return def;
    const auto& v = j_.at(key);
    std::string range = describe_range(lo, hi, lo_open);
    if (!v.is_number()) throw SchemaError(field(key), "a number" + range, v.dump());
    const double x = v.get<double>();
    if (!std::isfinite(x) || x > hi || x < lo || (lo_open && x == lo)) throw SchemaError(field(key), "a number" + range, v.dump());
    return x;
  }

  std::uint64_t integer(const std::string& key, std::uint64_t def, std::uint64_t lo = 0) {
    if (!has(key)) return def;
    const auto& v = j_.at(key);
    const std::string expected = "an integer >= " + std::to_string(lo);
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
      throw SchemaError(field(key), expected, v.dump());
    }
    const auto x = v.get<std::uint64_t>();
    if (x < lo) throw SchemaError(field(key), expected, v.dump());
    return x;
  }

  std::string string(const std::string& key, const std::string& def, const std::vector<std::string>& allowed = {}) {
    if (!has(key)) return def;
    const auto& v = j_.at(key);
    std::string expected = "a string";
    if (!allowed.empty()) {
      expected = "one of";
      for (const auto& a : allowed) expected += " '" + a + "'";
    }
    if (!v.is_string()) throw SchemaError(field(key), expected, v.dump());
    auto s = v.get<std::string>();
    if (!allowed.empty() && std::find(allowed.begin(), allowed.end(), s) == allowed.end()) {
      throw SchemaError(field(key), expected, v.dump());
    }
    return s;
  }

  std::vector<std::size_t> sizes(const std::string& key, std::vector<std::size_t> def) {
    if (!has(key)) return def;
    const auto& v = j_.at(key);
    const std::string expected = "a nonempty array of positive integers";
    if (!v.is_array() || v.empty()) throw SchemaError(field(key), expected, v.dump());
    std::vector<std::size_t> out;
    for (const auto& e : v) {
      if (!e.is_number_integer() || e.get<std::int64_t>() <= 0) throw SchemaError(field(key), expected, v.dump());
      out.push_back(e.get<std::size_t>());
    }
    return out;
  }

  std::vector<std::string> strings(const std::string& key, std::vector<std::string> def, const std::vector<std::string>& allowed) {
    if (!has(key)) return def;
    const auto& v = j_.at(key);
    std::string expected = "an array of";
    for (const auto& a : allowed) expected += " '" + a + "'";
    if (!v.is_array()) throw SchemaError(field(key), expected, v.dump());
    std::vector<std::string> out;
    for (const auto& e : v) {
      if (!e.is_string() || std::find(allowed.begin(), allowed.end(), e.get<std::string>()) == allowed.end()) {
        throw SchemaError(field(key), expected, v.dump());
      }
      out.push_back(e.get<std::string>());
    }
    return out;
  }

  void finish() const {
    for (const auto& [k, _] : j_.items()) {
      if (!seen_.count(k)) throw ValidationError("unknown key '" + field(k) + "'");
    }
  }

 private:
  static std::string fmt(double x) {
    std::ostringstream os;
    os << x;
    return os.str();
  }
  static std::string describe_range(double lo, double hi, bool lo_open) {
    const bool has_lo = std::isfinite(lo), has_hi = std::isfinite(hi);
    if (has_lo && has_hi) return std::string(" in ") + (lo_open ? "(" : "[") + fmt(lo) + ", " + fmt(hi) + "]";
    if (has_lo) return std::string(lo_open ? " > " : " >= ") + fmt(lo);
    if (has_hi) return " <= " + fmt(hi);
    return "";
  }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline std::string resolve_path(const fs::path& base, const std::string& p) {
  if (p.empty()) return p;
  fs::path q(p);
  return (q.is_absolute() ? q : base / q).lexically_normal().string();
}

}  // namespace detail

// ---- plan ------------------------------------------------------------------------

struct Command {
  std::string name;
  nlohmann::json args = nlohmann::json::object();
};

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"set_alpha", "set_reconstruction_loss", "set_model_loss", "tap_layer",
                                              "freeze",    "unfreeze",                "select_subset",  "train_kt",
                                              "finetune",  "evaluate",                "save_checkpoint"};
  return names;
}

struct DatasetRef {
  std::string interactions;                // tab-separated file
  std::optional<SyntheticSpec> synthetic;  // generated in memory instead
  std::array<double, 3> split{0.7, 0.1, 0.2};
};

struct TransferConfig {
  TransMethod method = TransMethod::pca;
  std::uint64_t seed = 0;
};

struct ExperimentPlan {
  std::string run_id;
  std::string output_dir = "runs";
  DatasetRef dataset;
  ModelSpec model;
  std::string embeddings;  // profile embeddings file; empty with synthetic data uses its profiles
  TransferConfig transfer;
  TrainConfig training;
  EvalOptions evaluation;
  std::vector<Command> commands;

  fs::path run_dir() const { return fs::path(output_dir) / run_id; }
  bool has_profiles() const { return !embeddings.empty() || dataset.synthetic.has_value(); }

  nlohmann::json to_json() const {
    nlohmann::json d{{"split", dataset.split}};
    if (dataset.synthetic) {
      const auto& s = *dataset.synthetic;
      d["synthetic"] = {{"n_users", s.n_users},
                        {"n_items", s.n_items},
                        {"latent_dim", s.latent_dim},
                        {"profile_dim", s.profile_dim},
                        {"profile_noise_sigma", s.profile_noise_sigma},
                        {"interactions_per_user", s.interactions_per_user},
                        {"seed", s.seed}};
    } else {
      d["interactions"] = dataset.interactions;
    }
    auto m = model.to_json();
    m.erase("n_users");
    m.erase("n_items");
    nlohmann::json eval{{"ks", evaluation.ks}};
    if (!evaluation.metrics.empty()) eval["metrics"] = evaluation.metrics;
    nlohmann::json cmds = nlohmann::json::array();
    for (const auto& c : commands) cmds.push_back({{"command", c.name}, {"args", c.args}});
    nlohmann::json train = training.to_json();
    train.erase("ks");
    train.erase("trans_method");
    train.erase("tap");
    nlohmann::json out{{"run_id", run_id},
                       {"output_dir", output_dir},
                       {"dataset", d},
                       {"model", m},
                       {"transfer", {{"method", to_string(transfer.method)}, {"seed", transfer.seed}}},
                       {"training", train},
                       {"evaluation", eval},
                       {"pipeline", cmds}};
    if (!embeddings.empty()) out["profiles"] = {{"embeddings", embeddings}};
    return out;
  }
};

namespace detail {

inline SyntheticSpec parse_synthetic(const nlohmann::json& j, const std::string& path) {
  Fields f(j, path);
  SyntheticSpec s;
  s.n_users = f.integer("n_users", s.n_users, 1);
  s.n_items = f.integer("n_items", s.n_items, 1);
  s.latent_dim = f.integer("latent_dim", s.latent_dim, 1);
  s.profile_dim = f.integer("profile_dim", s.profile_dim, 1);
  s.profile_noise_sigma = f.number("profile_noise_sigma", s.profile_noise_sigma, 0.0);
  s.interactions_per_user = f.integer("interactions_per_user", s.interactions_per_user, 1);
  s.seed = f.integer("seed", s.seed);
  f.finish();
  s.validate();
  return s;
}

// Validates one command's arguments and fills their defaults.
inline Command parse_command(const nlohmann::json& j, const std::string& path, const TrainConfig& training) {
  std::string name;
  nlohmann::json args = nlohmann::json::object();
  if (j.is_string()) {
    name = j.get<std::string>();
  } else {
    Fields f(j, path);
    name = f.string("command", "");
    if (name.empty()) throw SchemaError(path + ".command", "a command name", "nothing");
    if (f.has("args")) args = f.raw("args");
    f.finish();
  }
  const auto& known = command_names();
  if (std::find(known.begin(), known.end(), name) == known.end()) throw ValidationError("unknown command '" + name + "'");

  const std::string ap = path + ".args";
  Fields a(args, ap);
  nlohmann::json out = nlohmann::json::object();
  if (name == "set_alpha") {
    if (!a.has("value")) throw SchemaError(ap + ".value", "a number in [0, 1] (combined-loss weight)", "nothing");
    out["value"] = a.number("value", 0.0, 0.0, 1.0);
  } else if (name == "set_reconstruction_loss") {
    out["kind"] = a.string("kind", to_string(training.reconstruction), {"rmse", "mse", "cosine_distance"});
  } else if (name == "set_model_loss") {
    if (!a.has("kind")) throw SchemaError(ap + ".kind", "one of 'bce' 'mse' 'multinomial_nll'", "nothing");
    out["kind"] = a.string("kind", "", {"bce", "mse", "multinomial_nll"});
  } else if (name == "tap_layer") {
    out["name"] = a.string("name", "default");
  } else if (name == "freeze" || name == "unfreeze") {
    if (!a.has("group")) throw SchemaError(ap + ".group", "a parameter group name", "nothing");
    out["group"] = a.string("group", "");
  } else if (name == "select_subset") {
    if (!a.has("fraction")) throw SchemaError(ap + ".fraction", "a number in (0, 1]", "nothing");
    out["fraction"] = a.number("fraction", 1.0, 0.0, 1.0, true);
    out["seed"] = a.integer("seed", training.seed);
  } else if (name == "train_kt") {
    out["epochs"] = a.integer("epochs", training.phase1_epochs());
  } else if (name == "finetune") {
    out["epochs"] = a.integer("epochs", training.phase2_epochs());
  } else if (name == "evaluate") {
    out["split"] = a.string("split", "test", {"test", "valid"});
  } else if (name == "save_checkpoint") {
    const auto file = a.string("name", "checkpoint");
    if (file.empty() || file.find('/') != std::string::npos || file == "." || file == "..") {
      throw SchemaError(ap + ".name", "a plain file name", nlohmann::json(file).dump());
    }
    out["name"] = file;
  }
  a.finish();
  return {name, out};
}

}  // namespace detail

// The two-phase method as commands.
inline std::vector<Command> default_commands(const TrainConfig& t) {
  return {{"tap_layer", {{"name", "default"}}},
          {"set_alpha", {{"value", t.alpha}}},
          {"train_kt", {{"epochs", t.phase1_epochs()}}},
          {"finetune", {{"epochs", t.phase2_epochs()}}},
          {"evaluate", {{"split", "test"}}}};
}

// Builds and fully validates a plan from a config document. Relative file
// references resolve against `base_dir`.
inline ExperimentPlan parse_config_json(const nlohmann::json& doc, const fs::path& base_dir = ".") {
  detail::Fields root(doc, "");
  ExperimentPlan plan;
  plan.run_id = root.string("run_id", "run");
  if (plan.run_id.empty() || plan.run_id.find_first_not_of(
                                 "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_.-") != std::string::npos ||
      plan.run_id == "." || plan.run_id == "..") {
    throw SchemaError("run_id", "letters, digits, '_', '.' or '-'", nlohmann::json(plan.run_id).dump());
  }
  plan.output_dir = root.string("output_dir", "runs");

  if (!root.has("dataset")) throw ValidationError("missing dataset ref: config needs a 'dataset' section");
  {
    detail::Fields d(root.raw("dataset"), "dataset");
    const bool file = d.has("interactions");
    const bool synth = d.has("synthetic");
    if (file == synth) throw ValidationError("missing dataset ref: dataset needs exactly one of 'interactions' or 'synthetic'");
    if (file) {
      plan.dataset.interactions = detail::resolve_path(base_dir, d.string("interactions", ""));
      if (!fs::exists(plan.dataset.interactions)) throw ValidationError("dataset file not found: " + plan.dataset.interactions);
    } else {
      plan.dataset.synthetic = detail::parse_synthetic(d.raw("synthetic"), "dataset.synthetic");
    }
    if (d.has("split")) {
      const auto& s = d.raw("split");
      const std::string expected = "three nonnegative numbers summing to 1";
      if (!s.is_array() || s.size() != 3) throw SchemaError("dataset.split", expected, s.dump());
      double sum = 0.0;
      for (std::size_t i = 0; i < 3; ++i) {
        if (!s[i].is_number() || s[i].get<double>() < 0.0) throw SchemaError("dataset.split", expected, s.dump());
        plan.dataset.split[i] = s[i].get<double>();
        sum += plan.dataset.split[i];
      }
      if (std::abs(sum - 1.0) > 1e-9) throw SchemaError("dataset.split", expected, s.dump());
    }
    d.finish();
  }

  if (!root.has("model")) throw ValidationError("config needs a 'model' section");
  {
    detail::Fields m(root.raw("model"), "model");
    const auto kind = m.string("kind", "", {"neumf", "multvae", "dcn", "deepfm"});
    if (kind.empty()) throw SchemaError("model.kind", "one of 'neumf' 'multvae' 'dcn' 'deepfm'", "nothing");
    plan.model = ModelSpec::defaults(parse_model_kind(kind));
    plan.model.embedding_dim = m.integer("embedding_dim", plan.model.embedding_dim, 1);
    plan.model.hidden_widths = m.sizes("hidden_widths", plan.model.hidden_widths);
    plan.model.latent_dim = m.integer("latent_dim", plan.model.latent_dim, 1);
    plan.model.cross_layers = m.integer("cross_layers", plan.model.cross_layers);
    plan.model.kl_beta = m.number("kl_beta", plan.model.kl_beta, 0.0);
    plan.model.seed = m.integer("seed", plan.model.seed);
    m.finish();
  }

  if (root.has("profiles")) {
    detail::Fields p(root.raw("profiles"), "profiles");
    plan.embeddings = detail::resolve_path(base_dir, p.string("embeddings", ""));
    if (plan.embeddings.empty()) throw SchemaError("profiles.embeddings", "a file path", "nothing");
    if (!fs::exists(plan.embeddings)) throw ValidationError("profile embeddings file not found: " + plan.embeddings);
    p.finish();
  }

  if (root.has("transfer")) {
    detail::Fields t(root.raw("transfer"), "transfer");
    plan.transfer.method = parse_trans_method(t.string("method", "pca", {"identity", "random_projection", "pca"}));
    plan.transfer.seed = t.integer("seed", 0);
    t.finish();
  }

  auto& tc = plan.training;
  if (root.has("training")) {
    detail::Fields t(root.raw("training"), "training");
    tc.n_epochs = t.integer("epochs", tc.n_epochs, 1);
    tc.alpha = t.number("alpha", tc.alpha, 0.0, 1.0);
    tc.batch_size = t.integer("batch_size", tc.batch_size, 1);
    tc.learning_rate = t.number("learning_rate", tc.learning_rate, 0.0, HUGE_VAL, true);
    tc.neg_ratio = t.integer("neg_ratio", tc.neg_ratio, 1);
    tc.seed = t.integer("seed", tc.seed);
    tc.eval_every = t.integer("eval_every", tc.eval_every);
    tc.patience = t.integer("patience", tc.patience);
    tc.reconstruction = parse_reconstruction_kind(
        t.string("reconstruction_loss", to_string(tc.reconstruction), {"rmse", "mse", "cosine_distance"}));
    if (t.has("task")) tc.task = parse_task(t.string("task", "", {"ranking", "ctr"}));
    tc.ctr_threshold = t.number("ctr_threshold", tc.ctr_threshold);
    t.finish();
  }
  tc.trans_method = to_string(plan.transfer.method);
  if (tc.task == Task::ctr && plan.model.kind == ModelKind::multvae) {
    throw ValidationError("training.task 'ctr' needs a pairwise model (neumf, dcn or deepfm)");
  }

  if (root.has("evaluation")) {
    detail::Fields e(root.raw("evaluation"), "evaluation");
    plan.evaluation.metrics = e.strings("metrics", {}, {"recall", "ndcg", "hits", "auc"});
    plan.evaluation.ks = e.sizes("ks", plan.evaluation.ks);
    e.finish();
  }
  tc.ks = plan.evaluation.ks;
  plan.evaluation.task = tc.task;
  plan.evaluation.ctr_threshold = tc.ctr_threshold;

  if (root.has("pipeline")) {
    const auto& p = root.raw("pipeline");
    if (!p.is_array()) throw SchemaError("pipeline", "an array of commands", p.dump());
    for (std::size_t i = 0; i < p.size(); ++i) {
      plan.commands.push_back(detail::parse_command(p[i], "pipeline[" + std::to_string(i) + "]", tc));
    }
  } else {
    plan.commands = default_commands(tc);
  }
  root.finish();

  for (const auto& c : plan.commands) {
    if (c.name == "train_kt" && c.args["epochs"].get<std::size_t>() > 0 && !plan.has_profiles()) {
      throw ValidationError("train_kt needs profile embeddings: add a 'profiles' section");
    }
  }
  return plan;
}

inline ExperimentPlan parse_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open config: " + path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError("config " + path + " is not valid JSON: " + e.what());
  }
  return parse_config_json(doc, fs::path(path).parent_path());
}

// ---- execution ---------------------------------------------------------------------

struct RunOptions {
  bool force = false;  // replace an existing run directory
};

struct RunResult {
  std::string run_id;
  fs::path dir;
  std::string status;  // ok or failed
  std::string error;
  std::vector<MetricReport> metrics;
};

namespace detail {

struct LoadedData {
  InteractionTable table;
  std::optional<ProfileStore> profiles;
};

inline LoadedData load_plan_data(const ExperimentPlan& plan) {
  LoadedData out;
  if (plan.dataset.synthetic) {
    auto data = gen_synthetic(*plan.dataset.synthetic);
    out.table = std::move(data.table);
    out.profiles = std::move(data.profiles);
  } else {
    out.table = load_interactions(plan.dataset.interactions);
  }
  if (!plan.embeddings.empty()) out.profiles = ProfileStore::load_embeddings(plan.embeddings);
  if (out.table.empty()) throw ValidationError("dataset has no interactions");
  return out;
}

// Executes commands in order against one wrapper.
class PlanRunner {
 public:
  PlanRunner(const ExperimentPlan& plan, LoadedData data, const fs::path& dir, RunJournal& journal)
      : plan_(plan), data_(std::move(data)), dir_(dir), journal_(journal) {
    splits_ = temporal_split(data_.table, plan_.dataset.split);
    ModelSpec spec = plan_.model;
    spec.n_users = data_.table.n_users();
    spec.n_items = data_.table.n_items();
    wrapper_ = std::make_unique<ModelWrapper>(create_model(spec));
    wrapper_->set_losses(LossTerm::model_term(wrapper_->model().default_loss()), std::nullopt, plan_.training.alpha);
    trainer_ = std::make_unique<Trainer>(*wrapper_, splits_, plan_.training, journal_);
  }

  void execute(const Command& c) {
    const auto& a = c.args;
    if (c.name == "set_alpha") {
      const double v = a["value"].get<double>();
      wrapper_->set_alpha(v);
      trainer_->config().alpha = v;
    } else if (c.name == "set_reconstruction_loss") {
      trainer_->config().reconstruction = parse_reconstruction_kind(a["kind"].get<std::string>());
      if (wrapper_->reconstruction_enabled()) wrapper_->set_reconstruction_loss(trainer_->config().reconstruction, tap_);
    } else if (c.name == "set_model_loss") {
      wrapper_->set_model_loss(parse_model_loss_kind(a["kind"].get<std::string>()));
    } else if (c.name == "tap_layer") {
      const std::string tap = resolve_tap(wrapper_->model(), a["name"].get<std::string>());
      if (!tap_.empty()) wrapper_->detach_hook(tap_);
      wrapper_->attach_hook(tap);
      tap_ = tap;
      trainer_->config().tap_name = tap;
      bound_dim_ = 0;
    } else if (c.name == "freeze" || c.name == "unfreeze") {
      wrapper_->set_frozen(a["group"].get<std::string>(), c.name == "freeze");
    } else if (c.name == "select_subset") {
      trainer_->set_train_table(Trainer::select_subset(trainer_->train_table(), a["fraction"].get<double>(),
                                                       a["seed"].get<std::uint64_t>()));
      bound_dim_ = 0;
    } else if (c.name == "train_kt") {
      const auto n = a["epochs"].get<std::size_t>();
      if (n == 0) {
        journal_.warn("knowledge-transfer phase has zero epochs; training is pure fine-tuning");
        return;
      }
      ensure_profiles();
      wrapper_->set_reconstruction_loss(trainer_->config().reconstruction, tap_);
      trainer_->run_epochs(Phase::kt, n);
    } else if (c.name == "finetune") {
      trainer_->run_epochs(Phase::finetune, a["epochs"].get<std::size_t>());
    } else if (c.name == "evaluate") {
      const auto& split = a["split"].get<std::string>() == "valid" ? splits_.valid : splits_.test;
      if (split.empty()) throw ValidationError("evaluation split '" + a["split"].get<std::string>() + "' is empty");
      EvalOptions opts = plan_.evaluation;
      opts.task = trainer_->task();
      metrics_ = evaluate(wrapper_->model(), trainer_->train_table(), split, opts);
      journal_.set_final_metrics(metrics_);
    } else if (c.name == "save_checkpoint") {
      checkpoint_ = a["name"].get<std::string>();
      save_checkpoint(wrapper_->model(), (dir_ / checkpoint_).string());
    }
  }

  const std::vector<MetricReport>& metrics() const { return metrics_; }
  std::string& checkpoint() { return checkpoint_; }
  const TappableModel& model() const { return wrapper_->model(); }

 private:
  // Fits Trans on the current training users for the current tap width and
  // binds the aligned targets.
  void ensure_profiles() {
    if (!data_.profiles) throw ValidationError("train_kt needs profile embeddings");
    if (tap_.empty()) {
      tap_ = wrapper_->model().default_tap();
      wrapper_->attach_hook(tap_);
    }
    const std::size_t dim = wrapper_->model().find_tap(tap_)->dim;
    if (bound_dim_ == dim) return;
    const auto map = fit_trans_for(*data_.profiles, trainer_->train_table(), dim, plan_.transfer.method, plan_.transfer.seed);
    wrapper_->bind_profiles(align_for_training(*data_.profiles, trainer_->train_table(), map));
    bound_dim_ = dim;
  }

  const ExperimentPlan& plan_;
  LoadedData data_;
  fs::path dir_;
  RunJournal& journal_;
  SplitBundle splits_;
  std::unique_ptr<ModelWrapper> wrapper_;
  std::unique_ptr<Trainer> trainer_;
  std::string tap_;
  std::size_t bound_dim_ = 0;
  std::vector<MetricReport> metrics_;
  std::string checkpoint_;
};

}  // namespace detail

// Runs a validated plan into <output_dir>/<run_id>/ with config.json,
// journal.jsonl, checkpoint and metrics.csv. Input errors surface before the
// directory is created.
inline RunResult run_experiment(const ExperimentPlan& plan, const RunOptions& opts = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path dir = plan.run_dir();
  if (fs::exists(dir) && !opts.force) {
    throw ValidationError("run directory " + dir.string() + " already exists; pass --force to overwrite");
  }
  auto data = detail::load_plan_data(plan);

  if (fs::exists(dir)) fs::remove_all(dir);
  fs::create_directories(dir);
  {
    std::ofstream cfg(dir / "config.json", std::ios::binary);
    cfg << plan.to_json().dump(2) << '\n';
  }
  RunJournal journal(plan.run_id, plan.to_json());
  journal.attach_file((dir / "journal.jsonl").string());

  RunResult res{plan.run_id, dir, "ok", {}, {}};
  auto wall = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
  std::string where = "setup";
  try {
    detail::PlanRunner runner(plan, std::move(data), dir, journal);
    for (std::size_t i = 0; i < plan.commands.size(); ++i) {
      where = plan.commands[i].name + " (command " + std::to_string(i + 1) + ")";
      runner.execute(plan.commands[i]);
    }
    where = "finish";
    if (runner.checkpoint().empty()) {
      runner.checkpoint() = "checkpoint";
      save_checkpoint(runner.model(), (dir / "checkpoint").string());
    }
    write_metrics_csv(runner.metrics(), plan.run_id, (dir / "metrics.csv").string());
    res.metrics = runner.metrics();
    journal.finish(runner.checkpoint(), wall());
  } catch (const std::exception& e) {
    journal.fail(where, e.what(), wall());
    res.status = "failed";
    res.error = where + ": " + e.what();
  }
  return res;
}

// ---- batches -----------------------------------------------------------------------

struct BatchEntry {
  std::string source;  // config path
  std::optional<ExperimentPlan> plan;
  std::string validation_error;  // set when the config did not parse
};

struct BatchSummary {
  std::vector<RunResult> runs;  // input order
  std::size_t n_failed() const {
    return static_cast<std::size_t>(std::count_if(runs.begin(), runs.end(), [](const RunResult& r) { return r.status != "ok"; }));
  }

  // One row per run: run_id, status, then every metric@K seen in any run.
  void write_csv(const std::string& path) const {
    std::vector<std::pair<std::string, std::size_t>> cols;
    for (const auto& r : runs) {
      for (const auto& m : r.metrics) {
        std::pair<std::string, std::size_t> key{m.metric, m.k};
        if (std::find(cols.begin(), cols.end(), key) == cols.end()) cols.push_back(key);
      }
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw RuntimeFailure("cannot write batch summary: " + path);
    out << "run_id,status";
    for (const auto& [m, k] : cols) out << ',' << m << (k ? "@" + std::to_string(k) : "");
    out << ",error\n";
    out.precision(17);
    for (const auto& r : runs) {
      out << r.run_id << ',' << r.status;
      for (const auto& [m, k] : cols) {
        out << ',';
        if (const auto* rep = find_metric(r.metrics, m, k)) out << rep->value;
      }
      std::string err = r.error;
      std::replace(err.begin(), err.end(), ',', ';');
      std::replace(err.begin(), err.end(), '\n', ' ');
      out << ',' << err << '\n';
    }
  }
};

// Runs independent plans with at most `parallelism` at once. A failing run
// does not affect the others.
inline BatchSummary run_batch(const std::vector<ExperimentPlan>& plans, std::size_t parallelism, const RunOptions& opts = {}) {
  if (parallelism < 1) throw ValidationError("parallelism must be >= 1");
  std::set<std::string> dirs;
  for (const auto& p : plans) {
    if (!dirs.insert(p.run_dir().lexically_normal().string()).second) {
      throw ValidationError("two plans in the batch share the run directory " + p.run_dir().string());
    }
  }
  BatchSummary summary;
  summary.runs.resize(plans.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < plans.size(); i = next++) {
      try {
        summary.runs[i] = run_experiment(plans[i], opts);
      } catch (const std::exception& e) {
        summary.runs[i] = {plans[i].run_id, plans[i].run_dir(), "failed", e.what(), {}};
      }
    }
  };
  const std::size_t n = std::min(parallelism, std::max<std::size_t>(plans.size(), 1));
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < n; ++w) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  return summary;
}

// ---- comparison ----------------------------------------------------------------------

// Relative improvement in percent.
inline double impr(double base, double kt) {
  if (base == 0.0) throw ValidationError("improvement is undefined for a zero base value");
  return 100.0 * (kt - base) / base;
}

inline std::string format_fixed(double x, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, x);
  std::string s(buf);
  if (s.find_first_not_of("-0.") == std::string::npos && s[0] == '-') s.erase(0, 1);  // no "-0.00"
  return s;
}

struct LoadedRun {
  std::string run_id;
  fs::path dir;
  std::vector<MetricReport> metrics;
  std::vector<nlohmann::json> epochs;
};

inline LoadedRun load_run(const fs::path& dir) {
  LoadedRun r;
  r.dir = dir;
  const auto journal = dir / "journal.jsonl";
  if (!fs::exists(journal)) throw ValidationError("no journal.jsonl in " + dir.string());
  for (auto& line : RunJournal::read_lines(journal.string())) {
    const auto type = line.value("type", "");
    if (type == "config") r.run_id = line.value("run_id", "");
    if (type == "epoch") r.epochs.push_back(std::move(line));
  }
  if (r.run_id.empty()) r.run_id = dir.filename().string();
  if (fs::exists(dir / "metrics.csv")) r.metrics = read_metrics_csv((dir / "metrics.csv").string());
  return r;
}

struct ComparisonReport {
  std::vector<std::string> run_ids;
  std::vector<std::pair<std::string, std::size_t>> metrics;  // compared (metric, K)
  std::vector<std::vector<double>> values;                   // [metric][run]
  std::vector<std::string> warnings;
  fs::path csv_path;
  fs::path chart_path;
};

namespace detail {

inline std::string svg_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

// Static line chart of l_combined (solid) and l_model (dashed) per epoch;
// knowledge-transfer epochs are shaded.
inline void write_loss_chart(const std::vector<LoadedRun>& runs, const fs::path& path) {
  static constexpr const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"};
  const double W = 720, H = 420, L = 60, R = 180, T = 30, B = 50;
  std::size_t max_epoch = 1;
  double lo = HUGE_VAL, hi = -HUGE_VAL;
  for (const auto& r : runs) {
    for (const auto& e : r.epochs) {
      max_epoch = std::max<std::size_t>(max_epoch, e.value("epoch", 0));
      for (const char* k : {"l_combined", "l_model"}) {
        if (e.contains(k) && e[k].is_number()) {
          lo = std::min(lo, e[k].get<double>());
          hi = std::max(hi, e[k].get<double>());
        }
      }
    }
  }
  if (!(lo <= hi)) lo = 0.0, hi = 1.0;
  if (hi - lo < 1e-12) hi = lo + 1.0;
  auto x = [&](double e) { return L + (W - L - R) * (max_epoch > 1 ? (e - 1.0) / static_cast<double>(max_epoch - 1) : 0.5); };
  auto y = [&](double v) { return T + (H - T - B) * (1.0 - (v - lo) / (hi - lo)); };

  std::ostringstream s;
  s.precision(6);
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  // Shade the kt epochs of the first run.
  if (!runs.empty()) {
    std::size_t last_kt = 0;
    for (const auto& e : runs.front().epochs) {
      if (e.value("phase", "") == "kt") last_kt = e.value("epoch", 0);
    }
    if (last_kt > 0) {
      s << "<rect x=\"" << x(1) << "\" y=\"" << T << "\" width=\"" << std::max(1.0, x(static_cast<double>(last_kt)) - x(1))
        << "\" height=\"" << H - T - B << "\" fill=\"#eeeeee\"/>\n";
      s << "<text x=\"" << x(1) + 4 << "\" y=\"" << T + 12 << "\" fill=\"#666\">kt phase</text>\n";
    }
  }
  s << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = lo + (hi - lo) * i / 4.0;
    s << "<text x=\"" << L - 6 << "\" y=\"" << y(v) + 4 << "\" text-anchor=\"end\">" << format_fixed(v, 3) << "</text>\n";
  }
  s << "<text x=\"" << L << "\" y=\"" << H - B + 16 << "\">1</text>\n";
  s << "<text x=\"" << W - R << "\" y=\"" << H - B + 16 << "\" text-anchor=\"end\">" << max_epoch << "</text>\n";
  s << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">epoch</text>\n";
  s << "<text x=\"14\" y=\"" << (T + H - B) / 2 << "\" transform=\"rotate(-90 14 " << (T + H - B) / 2
    << ")\" text-anchor=\"middle\">loss</text>\n";
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const char* color = kColors[i % std::size(kColors)];
    for (const char* key : {"l_combined", "l_model"}) {
      std::ostringstream pts;
      pts.precision(6);
      for (const auto& e : runs[i].epochs) {
        if (!e.contains(key)) continue;
        pts << x(static_cast<double>(e.value("epoch", 0))) << ',' << y(e[key].get<double>()) << ' ';
      }
      s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\""
        << (std::string(key) == "l_model" ? " stroke-dasharray=\"4 3\"" : "") << " points=\"" << pts.str() << "\"/>\n";
    }
    const double ly = T + 14.0 * static_cast<double>(i) + 8;
    s << "<line x1=\"" << W - R + 12 << "\" y1=\"" << ly << "\" x2=\"" << W - R + 32 << "\" y2=\"" << ly << "\" stroke=\""
      << color << "\" stroke-width=\"2\"/>\n";
    s << "<text x=\"" << W - R + 36 << "\" y=\"" << ly + 4 << "\">" << svg_escape(runs[i].run_id) << "</text>\n";
  }
  const double ny = T + 14.0 * static_cast<double>(runs.size()) + 16;
  s << "<text x=\"" << W - R + 12 << "\" y=\"" << ny << "\" fill=\"#666\">solid: l_combined</text>\n";
  s << "<text x=\"" << W - R + 12 << "\" y=\"" << ny + 14 << "\" fill=\"#666\">dashed: l_model</text>\n";
  s << "</svg>\n";
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeFailure("cannot write chart: " + path.string());
  out << s.str();
}

}  // namespace detail

// Side-by-side final metrics of two or more runs. The first run is the base;
// every other run gets an Impr. % column against it. Writes comparison.csv
// and loss_curves.svg into out_dir.
inline ComparisonReport compare_runs(const std::vector<fs::path>& run_dirs, const fs::path& out_dir) {
  if (run_dirs.size() < 2) throw ValidationError("compare_runs needs at least two run directories");
  std::vector<LoadedRun> runs;
  for (const auto& d : run_dirs) runs.push_back(load_run(d));

  ComparisonReport rep;
  for (const auto& r : runs) rep.run_ids.push_back(r.run_id);
  for (const auto& m : runs.front().metrics) {
    const std::pair<std::string, std::size_t> key{m.metric, m.k};
    bool everywhere = true;
    for (const auto& r : runs) everywhere = everywhere && find_metric(r.metrics, m.metric, m.k);
    if (everywhere) {
      rep.metrics.push_back(key);
    } else {
      rep.warnings.push_back("metric " + m.metric + "@" + std::to_string(m.k) + " is missing from some runs; skipped");
    }
  }
  for (std::size_t i = 1; i < runs.size(); ++i) {
    for (const auto& m : runs[i].metrics) {
      if (!find_metric(runs.front().metrics, m.metric, m.k)) {
        rep.warnings.push_back("metric " + m.metric + "@" + std::to_string(m.k) + " of run " + runs[i].run_id +
                               " is missing from the base run; skipped");
      }
    }
  }
  if (rep.metrics.empty()) rep.warnings.push_back("the runs share no metrics");

  fs::create_directories(out_dir);
  rep.csv_path = out_dir / "comparison.csv";
  std::ofstream out(rep.csv_path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeFailure("cannot write " + rep.csv_path.string());
  out << "metric,K";
  for (const auto& id : rep.run_ids) out << ',' << id;
  for (std::size_t i = 1; i < runs.size(); ++i) out << ",Impr. % " << rep.run_ids[i];
  out << '\n';
  for (const auto& [name, k] : rep.metrics) {
    std::vector<double> vals;
    for (const auto& r : runs) vals.push_back(find_metric(r.metrics, name, k)->value);
    out << name << ',' << k;
    for (double v : vals) out << ',' << format_fixed(v, 4);
    for (std::size_t i = 1; i < vals.size(); ++i) {
      out << ',';
      if (vals[0] != 0.0) {
        out << format_fixed(impr(vals[0], vals[i]), 2);
      } else {
        rep.warnings.push_back(name + "@" + std::to_string(k) + ": base value is zero; improvement left blank");
      }
    }
    out << '\n';
    rep.values.push_back(std::move(vals));
  }
  rep.chart_path = out_dir / "loss_curves.svg";
  detail::write_loss_chart(runs, rep.chart_path);
  return rep;
}

}  // namespace llmkt
