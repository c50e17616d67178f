#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "llmkt/dataset.hpp"
#include "llmkt/error.hpp"
#include "llmkt/metrics.hpp"
#include "llmkt/models.hpp"
#include "llmkt/random.hpp"
#include "llmkt/transfer.hpp"
#include "llmkt/wrapper.hpp"

namespace llmkt {

enum class Phase { kt, finetune };
enum class Task { ranking, ctr };

inline std::string to_string(Phase p) { return p == Phase::kt ? "kt" : "finetune"; }
inline std::string to_string(Task t) { return t == Task::ranking ? "ranking" : "ctr"; }
inline Task parse_task(const std::string& s) {
  if (s == "ranking") return Task::ranking;
  if (s == "ctr") return Task::ctr;
  throw ValidationError("unknown task '" + s + "' (expected ranking or ctr)");
}

// Pairwise models trained on explicit CTR labels by default are the
// context-aware ones.
inline Task default_task(ModelKind k) { return (k == ModelKind::dcn || k == ModelKind::deepfm) ? Task::ctr : Task::ranking; }

struct TrainConfig {
  std::size_t n_epochs = 70;
  double alpha = 0.5;
  std::size_t batch_size = 256;
  double learning_rate = 1e-3;
  std::size_t neg_ratio = 4;
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;  // 0: no per-epoch validation
  std::size_t patience = 0;    // 0: no early stopping
  std::string tap_name = "default";
  std::string trans_method = "pca";
  ReconstructionKind reconstruction = ReconstructionKind::rmse;
  std::optional<Task> task;  // defaults per model kind
  double ctr_threshold = 4.0;
  std::vector<std::size_t> ks{10};
  std::string checkpoint_path;  // empty: no checkpoint written

  std::size_t phase1_epochs() const { return n_epochs / 2; }
  std::size_t phase2_epochs() const { return n_epochs - phase1_epochs(); }

  void validate() const {
    if (n_epochs < 1) throw ValidationError("training.epochs must be >= 1");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("training.alpha must lie in [0, 1]");
    if (batch_size < 1) throw ValidationError("training.batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw ValidationError("training.learning_rate must be > 0");
    if (neg_ratio < 1) throw ValidationError("training.neg_ratio must be >= 1");
    if (ks.empty()) throw ValidationError("training.ks must be nonempty");
    for (auto k : ks) {
      if (k < 1) throw ValidationError("training.ks entries must be >= 1");
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json j{{"epochs", n_epochs},       {"alpha", alpha},
                     {"batch_size", batch_size}, {"learning_rate", learning_rate},
                     {"neg_ratio", neg_ratio},   {"seed", seed},
                     {"eval_every", eval_every}, {"patience", patience},
                     {"tap", tap_name},          {"trans_method", trans_method},
                     {"reconstruction_loss", to_string(reconstruction)},
                     {"ctr_threshold", ctr_threshold}, {"ks", ks}};
    if (task) j["task"] = to_string(*task);
    return j;
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  Phase phase = Phase::finetune;
  double l_model = 0.0;
  std::optional<double> l_kt;
  double l_combined = 0.0;
  double alpha_effective = 0.0;
  double coverage = 0.0;  // fraction of rows with a profile (kt only)
  std::vector<MetricReport> metrics;
  double wall_seconds = 0.0;
};

inline nlohmann::json metrics_json(const std::vector<MetricReport>& ms) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& m : ms) a.push_back({{"metric", m.metric}, {"k", m.k}, {"value", m.value}, {"n_users", m.n_users}});
  return a;
}

// Audit trail of one run. Lines are streamed to the attached file as they
// are added.
class RunJournal {
 public:
  RunJournal() = default;
  RunJournal(std::string run_id, nlohmann::json config) : run_id_(std::move(run_id)), config_(std::move(config)) {}

  const std::string& run_id() const { return run_id_; }
  const nlohmann::json& config() const { return config_; }
  const std::vector<EpochRecord>& epochs() const { return epochs_; }
  const std::vector<std::string>& warnings() const { return warnings_; }
  const std::vector<MetricReport>& final_metrics() const { return final_metrics_; }
  const std::string& checkpoint() const { return checkpoint_; }
  const std::string& status() const { return status_; }
  std::size_t last_epoch() const { return epochs_.empty() ? 0 : epochs_.back().epoch; }

  void attach_file(const std::string& path) {
    out_.open(path, std::ios::binary | std::ios::trunc);
    if (!out_) throw RuntimeFailure("cannot write journal: " + path);
    emit(config_line());
    for (const auto& e : epochs_) emit(epoch_line(e));
  }

  void add_epoch(EpochRecord e) {
    if (!epochs_.empty() && e.epoch <= epochs_.back().epoch) throw Error("journal epochs must increase");
    emit(epoch_line(e));
    epochs_.push_back(std::move(e));
  }

  void warn(std::string w) {
    emit({{"type", "warning"}, {"message", w}});
    warnings_.push_back(std::move(w));
  }

  void set_final_metrics(std::vector<MetricReport> m) { final_metrics_ = std::move(m); }

  void finish(const std::string& checkpoint, double wall_seconds) {
    checkpoint_ = checkpoint;
    status_ = "ok";
    emit({{"type", "final"}, {"status", status_}, {"checkpoint", checkpoint_}, {"metrics", metrics_json(final_metrics_)},
          {"wall_time_s", wall_seconds}});
  }

  void fail(const std::string& where, const std::string& what, double wall_seconds) {
    status_ = "failed";
    emit({{"type", "final"}, {"status", status_}, {"failed_at", where}, {"error", what}, {"wall_time_s", wall_seconds}});
  }

  nlohmann::json config_line() const { return {{"type", "config"}, {"run_id", run_id_}, {"config", config_}}; }

  static nlohmann::json epoch_line(const EpochRecord& e) {
    nlohmann::json j{{"type", "epoch"},       {"epoch", e.epoch},         {"phase", to_string(e.phase)},
                     {"l_model", e.l_model},  {"l_combined", e.l_combined}, {"alpha_effective", e.alpha_effective}};
    if (e.l_kt) {
      j["l_kt"] = *e.l_kt;
      j["coverage"] = e.coverage;
    }
    if (!e.metrics.empty()) j["metrics"] = metrics_json(e.metrics);
    j["wall_time_s"] = e.wall_seconds;
    return j;
  }

  // Parses a journal file back into its lines.
  static std::vector<nlohmann::json> read_lines(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open journal: " + path);
    std::vector<nlohmann::json> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      try {
        out.push_back(nlohmann::json::parse(line));
      } catch (const nlohmann::json::exception& e) {
        throw ParseError(e.what(), lineno);
      }
    }
    return out;
  }

  // Journal lines with wall-clock fields removed, for reproducibility checks.
  static std::vector<nlohmann::json> without_wall_clock(std::vector<nlohmann::json> lines) {
    for (auto& l : lines) l.erase("wall_time_s");
    return lines;
  }

 private:
  void emit(const nlohmann::json& j) {
    if (out_.is_open()) {
      out_ << j.dump() << '\n';
      out_.flush();
    }
  }

  std::string run_id_;
  nlohmann::json config_;
  std::vector<EpochRecord> epochs_;
  std::vector<std::string> warnings_;
  std::vector<MetricReport> final_metrics_;
  std::string checkpoint_;
  std::string status_ = "running";
  std::ofstream out_;
};

// ---- evaluation ----------------------------------------------------------------

struct EvalOptions {
  std::vector<std::string> metrics;  // empty: per-task default
  std::vector<std::size_t> ks{10};
  std::optional<Task> task;
  double ctr_threshold = 4.0;
};

// Per-user top-K lists over the full catalog, with the user's training
// positives removed from the candidates and from the relevant set.
inline std::vector<RankedList> rank_users(const TappableModel& model, const InteractionTable& train,
                                          const InteractionTable& eval, std::size_t max_k) {
  const std::size_t n_items = model.spec().n_items;
  auto seen = train.items_by_user();
  seen.resize(model.spec().n_users);
  std::vector<std::vector<std::uint32_t>> relevant(model.spec().n_users);
  for (const auto& r : eval.rows) relevant.at(r.user).push_back(r.item);

  std::vector<RankedList> out;
  std::vector<std::uint32_t> all_items(n_items);
  std::iota(all_items.begin(), all_items.end(), 0);
  for (std::uint32_t u = 0; u < relevant.size(); ++u) {
    if (relevant[u].empty()) continue;
    std::vector<char> excluded(n_items, 0);
    for (auto i : seen[u]) excluded[i] = 1;

    Batch b;
    Matrix scores;
    if (model.pairwise()) {
      b.users.assign(n_items, u);
      b.items = all_items;
      b.targets = Matrix::Zero(static_cast<Eigen::Index>(n_items), 1);
      scores = forward(model, b).predictions;
    } else {
      b.users = {u};
      b.targets = Matrix::Zero(1, static_cast<Eigen::Index>(n_items));
      for (auto i : seen[u]) b.targets(0, i) = 1.0;
      scores = forward(model, b).predictions.transpose();
    }
    std::vector<std::uint32_t> cand;
    cand.reserve(n_items);
    for (std::uint32_t i = 0; i < n_items; ++i) {
      if (!excluded[i]) cand.push_back(i);
    }
    const std::size_t k = std::min(max_k, cand.size());
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end(), [&](auto a, auto c) {
      const double sa = scores(a, 0);
      const double sc = scores(c, 0);
      return sa > sc || (sa == sc && a < c);
    });
    cand.resize(k);

    RankedList rl;
    rl.user_id = train.users.id(u);
    rl.items = std::move(cand);
    for (auto i : relevant[u]) {
      if (!excluded[i]) rl.relevant.insert(i);
    }
    out.push_back(std::move(rl));
  }
  return out;
}

// Pointwise scores for every row of a table.
inline std::vector<double> score_rows(const TappableModel& model, const InteractionTable& table,
                                      const InteractionTable& history, std::size_t chunk = 4096) {
  std::vector<double> out;
  out.reserve(table.size());
  if (model.pairwise()) {
    for (std::size_t start = 0; start < table.size(); start += chunk) {
      const std::size_t end = std::min(table.size(), start + chunk);
      Batch b;
      for (std::size_t r = start; r < end; ++r) {
        b.users.push_back(table.rows[r].user);
        b.items.push_back(table.rows[r].item);
      }
      b.targets = Matrix::Zero(static_cast<Eigen::Index>(end - start), 1);
      const Matrix p = forward(model, b).predictions;
      for (Eigen::Index r = 0; r < p.rows(); ++r) out.push_back(p(r, 0));
    }
    return out;
  }
  auto seen = history.items_by_user();
  for (const auto& row : table.rows) {
    Batch b;
    b.users = {row.user};
    b.targets = Matrix::Zero(1, static_cast<Eigen::Index>(model.spec().n_items));
    if (row.user < seen.size()) {
      for (auto i : seen[row.user]) b.targets(0, i) = 1.0;
    }
    out.push_back(forward(model, b).predictions(0, row.item));
  }
  return out;
}

// Ranking metrics (recall, ndcg, hits) over the full catalog, or AUC-ROC on
// thresholded ratings for the CTR task.
inline std::vector<MetricReport> evaluate(const TappableModel& model, const InteractionTable& train,
                                          const InteractionTable& eval, const EvalOptions& opts) {
  if (eval.empty()) throw ValidationError("evaluation split is empty");
  const Task task = opts.task.value_or(default_task(model.kind()));
  std::vector<std::string> names = opts.metrics;
  if (names.empty()) names = task == Task::ranking ? std::vector<std::string>{"recall", "ndcg", "hits"} : std::vector<std::string>{"auc"};

  std::vector<MetricReport> out;
  std::vector<RankedList> lists;
  bool ranked = false;
  for (const auto& name : names) {
    if (name == "auc") {
      const auto labels_ex = make_ctr_labels(eval, opts.ctr_threshold);
      std::vector<double> labels;
      labels.reserve(labels_ex.size());
      for (const auto& e : labels_ex) labels.push_back(e.label);
      const auto scores = score_rows(model, eval, train);
      MetricReport rep{"auc", 0, 0.0, 0, 0};
      const auto pos = std::count(labels.begin(), labels.end(), 1.0);
      if (pos == 0 || pos == static_cast<std::ptrdiff_t>(labels.size())) {
        rep.n_skipped = labels.size();
      } else {
        rep.value = auc_roc(scores, labels);
        rep.n_users = eval.n_users();
      }
      out.push_back(rep);
      continue;
    }
    if (!ranked) {
      std::size_t max_k = 0;
      for (auto k : opts.ks) max_k = std::max(max_k, k);
      lists = rank_users(model, train, eval, max_k);
      ranked = true;
    }
    for (auto k : opts.ks) out.push_back(ranking_metric(name, lists, k));
  }
  return out;
}

// ---- training loop ---------------------------------------------------------------

// Runs epochs against a wrapper, journaling one record per epoch. Epoch
// numbering continues across calls so a run can mix phases.
class Trainer {
 public:
  Trainer(ModelWrapper& wrapper, const SplitBundle& splits, TrainConfig config, RunJournal& journal)
      : wrapper_(wrapper), splits_(splits), train_(splits.train), config_(std::move(config)), journal_(journal) {
    config_.validate();
    wrapper_.set_learning_rate(config_.learning_rate);
    task_ = config_.task.value_or(default_task(wrapper_.model().kind()));
    if (task_ == Task::ctr && !wrapper_.model().pairwise()) throw ValidationError("the ctr task needs a pairwise model");
  }

  const TrainConfig& config() const { return config_; }
  TrainConfig& config() { return config_; }
  Task task() const { return task_; }
  std::size_t epochs_done() const { return epoch_; }
  const InteractionTable& train_table() const { return train_; }

  // Replaces the training rows (used to train on a subset).
  void set_train_table(InteractionTable t) { train_ = std::move(t); }

  // Keeps a deterministic fraction of the training rows, preserving order.
  static InteractionTable select_subset(const InteractionTable& train, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw ValidationError("select_subset fraction must lie in (0, 1]");
    std::vector<std::size_t> idx(train.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed, 0x737562);
    rng.shuffle(idx.begin(), idx.end());
    idx.resize(split_cut(fraction, train.size()));
    std::sort(idx.begin(), idx.end());
    InteractionTable out = train.empty_like();
    for (auto i : idx) out.rows.push_back(train.rows[i]);
    return out;
  }

  // kt: combined loss with the wrapper's reconstruction term (enabled with
  // the configured kind if needed). finetune: model loss only.
  void run_epochs(Phase phase, std::size_t count) {
    if (phase == Phase::kt) {
      if (!wrapper_.reconstruction_enabled()) wrapper_.set_reconstruction_loss(config_.reconstruction);
    } else {
      wrapper_.disable_reconstruction();
    }
    for (std::size_t e = 0; e < count; ++e) {
      if (stopped_) break;
      run_one_epoch(phase);
    }
  }

  bool stopped_early() const { return stopped_; }

 private:
  std::vector<Batch> make_batches(std::size_t epoch) const {
    const std::uint64_t stream = epoch;
    Rng rng(config_.seed, stream);
    std::vector<Batch> batches;
    const auto& model = wrapper_.model();
    if (model.pairwise()) {
      std::vector<LabeledExample> ex;
      if (task_ == Task::ranking) {
        ex = sample_negatives(train_, config_.neg_ratio, mix64(config_.seed) ^ mix64(stream + 1)).examples;
      } else {
        ex = make_ctr_labels(train_, config_.ctr_threshold);
      }
      rng.shuffle(ex.begin(), ex.end());
      for (std::size_t start = 0; start < ex.size(); start += config_.batch_size) {
        const std::size_t end = std::min(ex.size(), start + config_.batch_size);
        Batch b;
        b.targets.resize(static_cast<Eigen::Index>(end - start), 1);
        for (std::size_t r = start; r < end; ++r) {
          b.users.push_back(ex[r].user);
          b.items.push_back(ex[r].item);
          b.targets(static_cast<Eigen::Index>(r - start), 0) = ex[r].label;
        }
        batches.push_back(std::move(b));
      }
      return batches;
    }
    auto hist = train_.items_by_user();
    std::vector<std::uint32_t> users;
    for (std::uint32_t u = 0; u < hist.size(); ++u) {
      if (!hist[u].empty()) users.push_back(u);
    }
    rng.shuffle(users.begin(), users.end());
    const auto n_items = static_cast<Eigen::Index>(model.spec().n_items);
    const auto latent = static_cast<Eigen::Index>(model.spec().latent_dim);
    for (std::size_t start = 0; start < users.size(); start += config_.batch_size) {
      const std::size_t end = std::min(users.size(), start + config_.batch_size);
      Batch b;
      b.targets = Matrix::Zero(static_cast<Eigen::Index>(end - start), n_items);
      b.noise.resize(static_cast<Eigen::Index>(end - start), latent);
      for (std::size_t r = start; r < end; ++r) {
        const auto u = users[r];
        b.users.push_back(u);
        for (auto i : hist[u]) b.targets(static_cast<Eigen::Index>(r - start), i) = 1.0;
      }
      for (Eigen::Index i = 0; i < b.noise.size(); ++i) b.noise(i) = rng.normal();
      batches.push_back(std::move(b));
    }
    return batches;
  }

  void run_one_epoch(Phase phase) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t epoch = ++epoch_;
    auto batches = make_batches(epoch);
    CompensatedSum model_sum, kt_sum;
    double rows = 0.0;
    std::size_t masked = 0;
    for (const auto& b : batches) {
      StepReport rep = wrapper_.composed_step(b);
      const double w = static_cast<double>(rep.batch_rows);
      model_sum.add(rep.l_model * w);
      kt_sum.add(rep.l_kt * w);
      rows += w;
      masked += rep.masked_rows;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.phase = phase;
    rec.l_model = rows > 0 ? model_sum.value() / rows : 0.0;
    if (phase == Phase::kt) {
      const double l_kt = rows > 0 ? kt_sum.value() / rows : 0.0;
      rec.l_kt = l_kt;
      rec.alpha_effective = wrapper_.alpha();
      rec.l_combined = combined_loss(l_kt, rec.l_model, rec.alpha_effective);
      rec.coverage = rows > 0 ? static_cast<double>(masked) / rows : 0.0;
    } else {
      rec.alpha_effective = 0.0;
      rec.l_combined = rec.l_model;
    }
    if (config_.eval_every > 0 && epoch % config_.eval_every == 0 && !splits_.valid.empty()) {
      EvalOptions opts;
      opts.ks = config_.ks;
      opts.task = task_;
      opts.ctr_threshold = config_.ctr_threshold;
      rec.metrics = evaluate(wrapper_.model(), train_, splits_.valid, opts);
      track_patience(rec.metrics);
    }
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    journal_.add_epoch(std::move(rec));
  }

  void track_patience(const std::vector<MetricReport>& ms) {
    if (config_.patience == 0 || ms.empty()) return;
    // The first reported metric is the selection criterion.
    const double v = ms.front().value;
    if (v > best_) {
      best_ = v;
      since_best_ = 0;
    } else if (++since_best_ >= config_.patience) {
      stopped_ = true;
      journal_.warn("early stop after epoch " + std::to_string(epoch_));
    }
  }

  ModelWrapper& wrapper_;
  const SplitBundle& splits_;
  InteractionTable train_;
  TrainConfig config_;
  RunJournal& journal_;
  Task task_ = Task::ranking;
  std::size_t epoch_ = 0;
  double best_ = -std::numeric_limits<double>::infinity();
  std::size_t since_best_ = 0;
  bool stopped_ = false;
};

inline std::string resolve_tap(const TappableModel& model, const std::string& name) {
  return name.empty() || name == "default" ? model.default_tap() : name;
}

// Fits Trans on the embeddings of users present in the training split.
inline TransMap fit_trans_for(const ProfileStore& store, const InteractionTable& train, std::size_t target_dim,
                              TransMethod method, std::uint64_t seed) {
  std::vector<std::uint32_t> users;
  std::vector<char> in_train(train.n_users(), 0);
  for (const auto& r : train.rows) in_train[r.user] = 1;
  for (std::uint32_t u = 0; u < in_train.size(); ++u) {
    if (in_train[u]) users.push_back(u);
  }
  const Matrix emb = gather_embeddings(store, train.users, users);
  if (emb.rows() == 0) throw ValidationError("no training user has a profile embedding");
  return fit_trans(emb, target_dim, method, seed);
}

// Profiles aligned for every user with training interactions; users with no
// training interactions are masked out.
inline AlignedProfiles align_for_training(const ProfileStore& store, const InteractionTable& train, const TransMap& map) {
  AlignedProfiles a = align_profiles(store, train.users, map);
  std::vector<char> in_train(train.n_users(), 0);
  for (const auto& r : train.rows) in_train[r.user] = 1;
  for (std::size_t u = 0; u < a.mask.size(); ++u) {
    if (!in_train[u]) a.mask[u] = 0;
  }
  return a;
}

namespace detail {

inline void finish_run(ModelWrapper& wrapper, const SplitBundle& splits, const Trainer& trainer, RunJournal& journal,
                       const TrainConfig& cfg, std::chrono::steady_clock::time_point t0) {
  if (!splits.test.empty()) {
    EvalOptions opts;
    opts.ks = cfg.ks;
    opts.task = trainer.task();
    opts.ctr_threshold = cfg.ctr_threshold;
    journal.set_final_metrics(evaluate(wrapper.model(), trainer.train_table(), splits.test, opts));
  }
  if (!cfg.checkpoint_path.empty()) save_checkpoint(wrapper.model(), cfg.checkpoint_path);
  journal.finish(cfg.checkpoint_path, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
}

}  // namespace detail

// floor(N/2) epochs with the combined loss, then the remaining epochs on the
// model loss alone.
inline RunJournal train_two_phase(ModelWrapper& wrapper, const SplitBundle& splits, const AlignedProfiles& profiles,
                                  const TrainConfig& cfg, const std::string& run_id = "run",
                                  const std::string& journal_path = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::string tap = resolve_tap(wrapper.model(), cfg.tap_name);
  const TapPoint* tp = wrapper.model().find_tap(tap);
  if (!tp) throw ValidationError("unknown tap '" + tap + "'");
  if (tp->dim != profiles.dim()) {
    throw DimensionError("tap '" + tap + "' has width " + std::to_string(tp->dim) + " but trans target dim is " +
                         std::to_string(profiles.dim()));
  }
  RunJournal journal(run_id, cfg.to_json());
  if (!journal_path.empty()) journal.attach_file(journal_path);
  wrapper.bind_profiles(profiles);
  wrapper.attach_hook(tap);
  wrapper.set_losses(LossTerm::model_term(wrapper.model().default_loss()),
                     LossTerm::reconstruction_term(cfg.reconstruction, tap), cfg.alpha);
  Trainer trainer(wrapper, splits, cfg, journal);
  if (cfg.phase1_epochs() == 0) journal.warn("N=1: knowledge-transfer phase has zero epochs; training is pure fine-tuning");
  trainer.run_epochs(Phase::kt, cfg.phase1_epochs());
  trainer.run_epochs(Phase::finetune, cfg.phase2_epochs());
  detail::finish_run(wrapper, splits, trainer, journal, cfg, t0);
  return journal;
}

// Same loop with the reconstruction term disabled for all N epochs.
inline RunJournal train_baseline(ModelWrapper& wrapper, const SplitBundle& splits, const TrainConfig& cfg,
                                 const std::string& run_id = "run", const std::string& journal_path = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  RunJournal journal(run_id, cfg.to_json());
  if (!journal_path.empty()) journal.attach_file(journal_path);
  wrapper.set_losses(LossTerm::model_term(wrapper.model().default_loss()), std::nullopt, 0.0);
  Trainer trainer(wrapper, splits, cfg, journal);
  trainer.run_epochs(Phase::finetune, cfg.n_epochs);
  detail::finish_run(wrapper, splits, trainer, journal, cfg, t0);
  return journal;
}

}  // namespace llmkt
