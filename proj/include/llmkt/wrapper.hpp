#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "llmkt/autodiff.hpp"
#include "llmkt/error.hpp"
#include "llmkt/models.hpp"
#include "llmkt/transfer.hpp"

namespace llmkt {

struct HookHandle {
  TapPoint tap;
  bool active = false;
};

struct LossTerm {
  enum class Kind { model, reconstruction };

  std::string name;
  Kind kind = Kind::model;
  double weight = 1.0;
  bool enabled = true;
  ModelLossKind model_loss = ModelLossKind::bce;
  ReconstructionKind reconstruction = ReconstructionKind::rmse;
  // Reconstruction only: the hooked tap to reconstruct at. Empty means the
  // single attached hook.
  std::string tap;

  static LossTerm model_term(ModelLossKind k) { return {"model", Kind::model, 1.0, true, k, {}, {}}; }
  static LossTerm reconstruction_term(ReconstructionKind k, std::string tap = {}) {
    return {"kt", Kind::reconstruction, 1.0, true, {}, k, std::move(tap)};
  }
};

struct StepReport {
  double l_model = 0.0;
  double l_kt = 0.0;
  double l_combined = 0.0;
  double alpha = 0.0;       // weight actually applied to l_kt
  bool kt_enabled = false;
  std::size_t batch_rows = 0;
  std::size_t masked_rows = 0;  // rows whose user has an aligned profile

  double coverage() const { return batch_rows ? static_cast<double>(masked_rows) / static_cast<double>(batch_rows) : 0.0; }
};

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Mediates between pipeline commands and a model: which activations are
// captured (hooks), which parameter groups train (weights), and how the batch
// loss is composed (losses).
class ModelWrapper {
 public:
  explicit ModelWrapper(std::unique_ptr<TappableModel> model, AdamConfig adam = {})
      : model_(std::move(model)), adam_(adam) {
    if (!model_) throw ValidationError("wrapper needs a model");
    for (const auto& g : model_->groups()) frozen_[g] = false;
    terms_.push_back(LossTerm::model_term(model_->default_loss()));
    reset_optimizer();
  }

  TappableModel& model() { return *model_; }
  const TappableModel& model() const { return *model_; }

  // ---- hook manager ---------------------------------------------------------

  HookHandle attach_hook(const std::string& tap) {
    const TapPoint* tp = model_->find_tap(tap);
    if (!tp) {
      std::ostringstream os;
      os << "unknown tap '" << tap << "'; available:";
      for (const auto& t : model_->tap_points()) os << ' ' << t.name << '(' << t.dim << ')';
      throw ValidationError(os.str());
    }
    hooks_.insert(tap);
    return {*tp, true};
  }

  void detach_hook(HookHandle& h) {
    hooks_.erase(h.tap.name);
    h.active = false;
  }
  void detach_hook(const std::string& tap) { hooks_.erase(tap); }
  void detach_all_hooks() { hooks_.clear(); }
  bool hooked(const std::string& tap) const { return hooks_.count(tap) > 0; }
  std::vector<std::string> active_hooks() const { return {hooks_.begin(), hooks_.end()}; }

  // Forward pass capturing every attached hook.
  ForwardOutput forward(const Batch& batch) const { return llmkt::forward(*model_, batch, active_hooks()); }

  // ---- weights manager ------------------------------------------------------

  void set_frozen(const std::string& group, bool frozen) {
    auto it = frozen_.find(group);
    if (it == frozen_.end()) {
      std::string known;
      for (const auto& [g, _] : frozen_) known += " " + g;
      throw ValidationError("unknown parameter group '" + group + "'; available:" + known);
    }
    it->second = frozen;
  }
  bool is_frozen(const std::string& group) const { return frozen_.at(group); }
  std::vector<std::string> groups() const { return model_->groups(); }

  // ---- loss manager ---------------------------------------------------------

  void bind_profiles(AlignedProfiles profiles) {
    if (profiles.mask.size() != model_->spec().n_users || static_cast<std::size_t>(profiles.targets.rows()) != model_->spec().n_users) {
      throw DimensionError("aligned profiles must cover every user of the model");
    }
    profiles_ = std::move(profiles);
  }
  bool has_profiles() const { return profiles_.has_value(); }
  const AlignedProfiles* profiles() const { return profiles_ ? &*profiles_ : nullptr; }

  // Replaces the model and reconstruction terms. Passing no reconstruction
  // term (or a disabled one) makes the composed loss the model loss alone.
  void set_losses(LossTerm model_term, std::optional<LossTerm> reconstruction_term, double alpha) {
    check_alpha(alpha);
    model_term.kind = LossTerm::Kind::model;
    std::vector<LossTerm> next{model_term};
    if (reconstruction_term) {
      reconstruction_term->kind = LossTerm::Kind::reconstruction;
      next.push_back(*reconstruction_term);
    }
    validate_terms(next, alpha);
    terms_ = std::move(next);
    alpha_ = alpha;
    sync_weights();
  }

  // Adds a term. A second enabled term of the same kind is rejected.
  void add_loss_term(LossTerm term) {
    auto next = terms_;
    next.push_back(std::move(term));
    validate_terms(next, alpha_);
    terms_ = std::move(next);
    sync_weights();
  }

  void remove_loss_term(const std::string& name) {
    auto it = std::find_if(terms_.begin(), terms_.end(), [&](const LossTerm& t) { return t.name == name; });
    if (it == terms_.end()) throw ValidationError("no loss term named '" + name + "'");
    terms_.erase(it);
  }

  void set_alpha(double alpha) {
    check_alpha(alpha);
    alpha_ = alpha;
    sync_weights();
  }
  double alpha() const { return alpha_; }

  void set_model_loss(ModelLossKind kind) {
    if (auto* t = enabled_term(LossTerm::Kind::model)) {
      t->model_loss = kind;
    } else {
      add_loss_term(LossTerm::model_term(kind));
    }
  }

  // Enables (or reconfigures) the reconstruction term.
  void set_reconstruction_loss(ReconstructionKind kind, const std::string& tap = {}) {
    auto next = terms_;
    auto it = std::find_if(next.begin(), next.end(), [](const LossTerm& t) { return t.kind == LossTerm::Kind::reconstruction; });
    if (it == next.end()) {
      next.push_back(LossTerm::reconstruction_term(kind, tap));
    } else {
      it->reconstruction = kind;
      it->enabled = true;
      if (!tap.empty()) it->tap = tap;
    }
    validate_terms(next, alpha_);
    terms_ = std::move(next);
    sync_weights();
  }

  void disable_reconstruction() {
    for (auto& t : terms_) {
      if (t.kind == LossTerm::Kind::reconstruction) t.enabled = false;
    }
  }

  bool reconstruction_enabled() const { return enabled_term(LossTerm::Kind::reconstruction) != nullptr; }
  const std::vector<LossTerm>& loss_terms() const { return terms_; }

  // Tap the reconstruction term reads from (empty when disabled).
  std::string reconstruction_tap() const {
    const LossTerm* t = enabled_term(LossTerm::Kind::reconstruction);
    if (!t) return {};
    if (!t->tap.empty()) return t->tap;
    if (hooks_.size() == 1) return *hooks_.begin();
    return {};
  }

  // ---- composition ----------------------------------------------------------

  struct Evaluation {
    StepReport report;
    std::vector<Matrix> gradients;  // per parameter; empty for frozen or untouched
  };

  // Composed loss and its gradient on a batch, without updating anything.
  Evaluation evaluate(const Batch& batch, bool with_gradients = true) const {
    const LossTerm* mterm = enabled_term(LossTerm::Kind::model);
    if (!mterm) throw ValidationError("no model loss term enabled");
    const LossTerm* rterm = enabled_term(LossTerm::Kind::reconstruction);

    Tape tape;
    Graph g = model_->build(tape, batch);
    auto l_model = model_loss_node(tape, *model_, g, batch, mterm->model_loss);

    Evaluation ev;
    StepReport& rep = ev.report;
    rep.batch_rows = batch.size();
    rep.l_model = tape.scalar(l_model);
    Tape::Var root = l_model;
    if (rterm) {
      const std::string tap = checked_reconstruction_tap(*rterm);
      const auto z = g.tap(tap);
      Matrix targets(static_cast<Eigen::Index>(batch.size()), static_cast<Eigen::Index>(profiles_->dim()));
      std::vector<char> mask(batch.size(), 0);
      for (std::size_t r = 0; r < batch.size(); ++r) {
        const auto u = batch.users[r];
        targets.row(static_cast<Eigen::Index>(r)) = profiles_->targets.row(u);
        mask[r] = profiles_->mask[u];
        rep.masked_rows += mask[r] ? 1 : 0;
      }
      auto l_kt = tape.reconstruction(z, targets, mask, rterm->reconstruction);
      rep.l_kt = tape.scalar(l_kt);
      rep.kt_enabled = true;
      rep.alpha = alpha_;
      root = tape.weighted_sum(l_kt, alpha_, l_model, 1.0 - alpha_);
    }
    const double combined = tape.scalar(root);
    if (!std::isfinite(combined) || !std::isfinite(rep.l_model) || !std::isfinite(rep.l_kt)) {
      std::ostringstream os;
      os << "non-finite loss: l_model=" << rep.l_model << " l_kt=" << rep.l_kt << " alpha=" << rep.alpha
         << " batch_rows=" << rep.batch_rows;
      throw RuntimeFailure(os.str());
    }
    rep.l_combined = rep.kt_enabled ? combined_loss(rep.l_kt, rep.l_model, alpha_) : rep.l_model;

    if (with_gradients) {
      tape.backward(root);
      ev.gradients = tape.parameter_grads(model_->parameters().size());
      const auto& params = model_->parameters();
      for (std::size_t k = 0; k < params.size(); ++k) {
        if (frozen_.at(params[k].group)) ev.gradients[k].resize(0, 0);
      }
    }
    return ev;
  }

  std::vector<Matrix> gradients(const Batch& batch) const { return evaluate(batch).gradients; }

  // One optimizer update on unfrozen parameters.
  StepReport composed_step(const Batch& batch) {
    Evaluation ev = evaluate(batch);
    auto& params = model_->parameters();
    for (std::size_t k = 0; k < params.size(); ++k) {
      if (frozen_.at(params[k].group) || ev.gradients[k].size() == 0) continue;
      adam_update(k, ev.gradients[k]);
    }
    return ev.report;
  }

  const AdamConfig& adam() const { return adam_; }
  void set_learning_rate(double lr) { adam_.learning_rate = lr; }

  void reset_optimizer() {
    const auto& params = model_->parameters();
    moments_.assign(params.size(), {});
    for (std::size_t k = 0; k < params.size(); ++k) {
      moments_[k].m = Matrix::Zero(params[k].value.rows(), params[k].value.cols());
      moments_[k].v = Matrix::Zero(params[k].value.rows(), params[k].value.cols());
      moments_[k].steps = 0;
    }
  }

 private:
  struct Moments {
    Matrix m;
    Matrix v;
    std::uint64_t steps = 0;
  };

  static void check_alpha(double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) {
      throw ValidationError("alpha must lie in [0, 1] (it weights the transfer loss against the model loss), got " +
                            std::to_string(alpha));
    }
  }

  void validate_terms(const std::vector<LossTerm>& terms, double /*alpha*/) const {
    int n_model = 0;
    int n_rec = 0;
    for (const auto& t : terms) {
      if (!t.enabled) continue;
      (t.kind == LossTerm::Kind::model ? n_model : n_rec)++;
    }
    if (n_model > 1) throw ValidationError("at most one model loss term may be enabled");
    if (n_rec > 1) throw ValidationError("at most one reconstruction loss term may be enabled");
    for (const auto& t : terms) {
      if (t.enabled && t.kind == LossTerm::Kind::reconstruction) checked_reconstruction_tap(t);
    }
  }

  // Throws when a reconstruction term cannot be evaluated.
  std::string checked_reconstruction_tap(const LossTerm& t) const {
    if (!profiles_) throw ValidationError("reconstruction loss enabled but no profiles are bound");
    if (hooks_.empty()) throw ValidationError("reconstruction loss enabled but no hook is attached");
    std::string tap = t.tap;
    if (tap.empty()) {
      if (hooks_.size() != 1) throw ValidationError("several hooks attached; name the reconstruction tap explicitly");
      tap = *hooks_.begin();
    }
    if (!hooks_.count(tap)) throw ValidationError("reconstruction tap '" + tap + "' has no attached hook");
    const TapPoint* tp = model_->find_tap(tap);
    if (tp->dim != profiles_->dim()) {
      throw DimensionError("tap '" + tap + "' has width " + std::to_string(tp->dim) + " but aligned profiles have " +
                           std::to_string(profiles_->dim()));
    }
    return tap;
  }

  const LossTerm* enabled_term(LossTerm::Kind k) const {
    for (const auto& t : terms_) {
      if (t.enabled && t.kind == k) return &t;
    }
    return nullptr;
  }
  LossTerm* enabled_term(LossTerm::Kind k) {
    for (auto& t : terms_) {
      if (t.enabled && t.kind == k) return &t;
    }
    return nullptr;
  }

  void sync_weights() {
    for (auto& t : terms_) t.weight = t.kind == LossTerm::Kind::reconstruction ? alpha_ : 1.0 - alpha_;
  }

  void adam_update(std::size_t k, const Matrix& g) {
    auto& mo = moments_[k];
    auto& w = model_->parameters()[k].value;
    mo.steps += 1;
    mo.m = adam_.beta1 * mo.m + (1.0 - adam_.beta1) * g;
    mo.v = adam_.beta2 * mo.v + (1.0 - adam_.beta2) * g.cwiseProduct(g);
    const double c1 = 1.0 - std::pow(adam_.beta1, static_cast<double>(mo.steps));
    const double c2 = 1.0 - std::pow(adam_.beta2, static_cast<double>(mo.steps));
    w.array() -= adam_.learning_rate * (mo.m.array() / c1) / ((mo.v.array() / c2).sqrt() + adam_.epsilon);
  }

  std::unique_ptr<TappableModel> model_;
  AdamConfig adam_;
  std::set<std::string> hooks_;
  std::map<std::string, bool> frozen_;
  std::vector<LossTerm> terms_;
  double alpha_ = 0.0;
  std::optional<AlignedProfiles> profiles_;
  std::vector<Moments> moments_;
};

}  // namespace llmkt
