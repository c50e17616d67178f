#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "llmkt/autodiff.hpp"
#include "llmkt/error.hpp"
#include "llmkt/random.hpp"

namespace llmkt {

enum class ModelKind { neumf, multvae, dcn, deepfm };
enum class ModelLossKind { bce, mse, multinomial_nll };

inline std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::neumf: return "neumf";
    case ModelKind::multvae: return "multvae";
    case ModelKind::dcn: return "dcn";
    case ModelKind::deepfm: return "deepfm";
  }
  return "?";
}

inline ModelKind parse_model_kind(const std::string& s) {
  if (s == "neumf") return ModelKind::neumf;
  if (s == "multvae") return ModelKind::multvae;
  if (s == "dcn") return ModelKind::dcn;
  if (s == "deepfm") return ModelKind::deepfm;
  throw ValidationError("unknown model kind '" + s + "' (expected neumf, multvae, dcn or deepfm)");
}

inline std::string to_string(ModelLossKind k) {
  switch (k) {
    case ModelLossKind::bce: return "bce";
    case ModelLossKind::mse: return "mse";
    case ModelLossKind::multinomial_nll: return "multinomial_nll";
  }
  return "?";
}

inline ModelLossKind parse_model_loss_kind(const std::string& s) {
  if (s == "bce") return ModelLossKind::bce;
  if (s == "mse") return ModelLossKind::mse;
  if (s == "multinomial_nll") return ModelLossKind::multinomial_nll;
  throw ValidationError("unknown model loss '" + s + "' (expected bce, mse or multinomial_nll)");
}

struct ModelSpec {
  ModelKind kind = ModelKind::neumf;
  std::size_t n_users = 0;
  std::size_t n_items = 0;
  std::size_t embedding_dim = 32;
  std::vector<std::size_t> hidden_widths{64, 32, 16};
  std::size_t latent_dim = 64;   // multvae
  std::size_t cross_layers = 2;  // dcn
  double kl_beta = 0.2;          // multvae
  std::uint64_t seed = 0;

  // Architecture defaults for a kind; vocabulary sizes still need filling in.
  static ModelSpec defaults(ModelKind kind) {
    ModelSpec s;
    s.kind = kind;
    switch (kind) {
      case ModelKind::neumf:
        s.embedding_dim = 32;
        s.hidden_widths = {64, 32, 16};
        break;
      case ModelKind::multvae:
        s.hidden_widths = {200};
        s.latent_dim = 64;
        break;
      case ModelKind::dcn:
        s.embedding_dim = 16;
        s.hidden_widths = {64, 32};
        s.cross_layers = 2;
        break;
      case ModelKind::deepfm:
        s.embedding_dim = 16;
        s.hidden_widths = {64, 32};
        break;
    }
    return s;
  }

  void validate() const {
    if (n_users < 1 || n_items < 1) throw ValidationError("model spec: vocabulary sizes must be >= 1");
    if (embedding_dim < 1 || latent_dim < 1) throw ValidationError("model spec: dimensions must be positive");
    if (hidden_widths.empty()) throw ValidationError("model spec: hidden_widths must be nonempty");
    for (auto w : hidden_widths) {
      if (w < 1) throw ValidationError("model spec: hidden widths must be positive");
    }
    if (!(kl_beta >= 0.0)) throw ValidationError("model spec: kl_beta must be >= 0");
  }

  nlohmann::json to_json() const {
    return {{"kind", to_string(kind)},       {"n_users", n_users},           {"n_items", n_items},
            {"embedding_dim", embedding_dim}, {"hidden_widths", hidden_widths}, {"latent_dim", latent_dim},
            {"cross_layers", cross_layers},   {"kl_beta", kl_beta},           {"seed", seed}};
  }

  static ModelSpec from_json(const nlohmann::json& j) {
    ModelSpec s = defaults(parse_model_kind(j.at("kind").get<std::string>()));
    s.n_users = j.value("n_users", s.n_users);
    s.n_items = j.value("n_items", s.n_items);
    s.embedding_dim = j.value("embedding_dim", s.embedding_dim);
    s.hidden_widths = j.value("hidden_widths", s.hidden_widths);
    s.latent_dim = j.value("latent_dim", s.latent_dim);
    s.cross_layers = j.value("cross_layers", s.cross_layers);
    s.kl_beta = j.value("kl_beta", s.kl_beta);
    s.seed = j.value("seed", s.seed);
    return s;
  }
};

struct TapPoint {
  std::string name;
  std::size_t dim = 0;
  std::string description;
  bool operator==(const TapPoint&) const = default;
};

struct TapActivation {
  TapPoint tap;
  Matrix values;  // batch x dim
};

// One batch. Row r of every tensor belongs to users[r].
//   pairwise models: items[r] is the item, targets is b x 1 (label or rating)
//   multvae: targets is the b x n_items multi-hot history, also the input
struct Batch {
  std::vector<std::uint32_t> users;
  std::vector<std::uint32_t> items;
  Matrix targets;
  // Reparameterization noise for multvae (b x latent_dim). Empty means the
  // latent mean is decoded directly (evaluation).
  Matrix noise;

  std::size_t size() const { return users.size(); }
};

// Tape nodes produced by one forward pass.
struct Graph {
  Tape::Var output;  // logits: b x 1 (pairwise) or b x n_items (multvae)
  std::vector<std::pair<std::string, Tape::Var>> taps;
  Tape::Var kl;  // multvae only

  Tape::Var tap(const std::string& name) const {
    for (const auto& [n, v] : taps) {
      if (n == name) return v;
    }
    throw ValidationError("tap '" + name + "' not produced by this forward pass");
  }
};

// A CF model whose forward pass exposes named internal activations.
class TappableModel {
 public:
  virtual ~TappableModel() = default;

  const ModelSpec& spec() const { return spec_; }
  ModelKind kind() const { return spec_.kind; }
  // True for models scored on (user, item) pairs with a sigmoid head.
  bool pairwise() const { return spec_.kind != ModelKind::multvae; }

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }

  // Registration order: input-side first, then hidden layers, then the
  // model-specific combination layer.
  const std::vector<TapPoint>& tap_points() const { return taps_; }
  const TapPoint* find_tap(const std::string& name) const {
    for (const auto& t : taps_) {
      if (t.name == name) return &t;
    }
    return nullptr;
  }
  // Last hidden activation before the output head (latent_mean for multvae).
  const std::string& default_tap() const { return default_tap_; }
  ModelLossKind default_loss() const { return pairwise() ? ModelLossKind::bce : ModelLossKind::multinomial_nll; }

  std::vector<std::string> groups() const {
    std::vector<std::string> out;
    for (const auto& p : params_) {
      if (std::find(out.begin(), out.end(), p.group) == out.end()) out.push_back(p.group);
    }
    return out;
  }

  std::size_t n_parameters() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  virtual Graph build(Tape& tape, const Batch& batch) const = 0;

  // Probabilities for pairwise models, item logits for multvae.
  Matrix predictions(const Tape& tape, const Graph& g) const {
    const Matrix& z = tape.value(g.output);
    if (!pairwise()) return z;
    return z.unaryExpr([](double x) { return logistic(x); });
  }

 protected:
  explicit TappableModel(ModelSpec spec) : spec_(std::move(spec)) {}

  std::size_t add_param(std::string name, std::string group, Eigen::Index rows, Eigen::Index cols, Rng& rng,
                        bool zero = false) {
    Matrix v = Matrix::Zero(rows, cols);
    if (!zero) {
      const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
      for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = rng.uniform(-a, a);
    }
    params_.push_back({std::move(name), std::move(group), std::move(v)});
    return params_.size() - 1;
  }

  void add_tap(std::string name, std::size_t dim, std::string description) {
    taps_.push_back({std::move(name), dim, std::move(description)});
  }

  Tape::Var p(Tape& tape, std::size_t index) const { return tape.parameter(index, params_[index].value); }

  // x * W + b
  Tape::Var dense(Tape& tape, Tape::Var x, std::size_t w, std::size_t b) const {
    return tape.add_row(tape.matmul(x, p(tape, w)), p(tape, b));
  }

  void check_pairwise_batch(const Batch& batch) const {
    if (batch.users.size() != batch.items.size()) throw ValidationError("batch users/items length mismatch");
    for (auto u : batch.users) {
      if (u >= spec_.n_users) throw ValidationError("user index " + std::to_string(u) + " out of range");
    }
    for (auto i : batch.items) {
      if (i >= spec_.n_items) throw ValidationError("item index " + std::to_string(i) + " out of range");
    }
  }

  ModelSpec spec_;
  std::vector<Parameter> params_;
  std::vector<TapPoint> taps_;
  std::string default_tap_;
};

// GMF(d) || MLP(concat 2d -> hidden...), fused by concatenation into a
// linear sigmoid head.
class NeuMF final : public TappableModel {
 public:
  explicit NeuMF(ModelSpec spec) : TappableModel(std::move(spec)) {
    Rng rng(spec_.seed, 0x6e65);
    const auto d = static_cast<Eigen::Index>(spec_.embedding_dim);
    gmf_user_ = add_param("gmf_user", "embeddings", static_cast<Eigen::Index>(spec_.n_users), d, rng);
    gmf_item_ = add_param("gmf_item", "embeddings", static_cast<Eigen::Index>(spec_.n_items), d, rng);
    mlp_user_ = add_param("mlp_user", "embeddings", static_cast<Eigen::Index>(spec_.n_users), d, rng);
    mlp_item_ = add_param("mlp_item", "embeddings", static_cast<Eigen::Index>(spec_.n_items), d, rng);
    add_tap("gmf", spec_.embedding_dim, "GMF branch: user embedding * item embedding");
    Eigen::Index in = 2 * d;
    for (std::size_t l = 0; l < spec_.hidden_widths.size(); ++l) {
      const auto w = static_cast<Eigen::Index>(spec_.hidden_widths[l]);
      const auto tag = "mlp_h" + std::to_string(l + 1);
      layers_.push_back({add_param(tag + ".weight", "hidden", in, w, rng), add_param(tag + ".bias", "hidden", 1, w, rng, true)});
      add_tap(tag, spec_.hidden_widths[l], "MLP hidden layer " + std::to_string(l + 1) + " (ReLU)");
      in = w;
    }
    const auto fusion = spec_.embedding_dim + spec_.hidden_widths.back();
    add_tap("fusion", fusion, "concatenation of GMF branch and last MLP layer");
    out_w_ = add_param("out.weight", "output", static_cast<Eigen::Index>(fusion), 1, rng);
    out_b_ = add_param("out.bias", "output", 1, 1, rng, true);
    default_tap_ = "mlp_h" + std::to_string(spec_.hidden_widths.size());
  }

  Graph build(Tape& t, const Batch& batch) const override {
    check_pairwise_batch(batch);
    Graph g;
    auto gmf = t.hadamard(t.gather_rows(p(t, gmf_user_), batch.users), t.gather_rows(p(t, gmf_item_), batch.items));
    g.taps.emplace_back("gmf", gmf);
    auto x = t.concat_cols({t.gather_rows(p(t, mlp_user_), batch.users), t.gather_rows(p(t, mlp_item_), batch.items)});
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      x = t.relu(dense(t, x, layers_[l].first, layers_[l].second));
      g.taps.emplace_back("mlp_h" + std::to_string(l + 1), x);
    }
    auto fusion = t.concat_cols({gmf, x});
    g.taps.emplace_back("fusion", fusion);
    g.output = dense(t, fusion, out_w_, out_b_);
    return g;
  }

 private:
  std::size_t gmf_user_, gmf_item_, mlp_user_, mlp_item_, out_w_, out_b_;
  std::vector<std::pair<std::size_t, std::size_t>> layers_;
};

// Multi-hot history -> tanh encoder -> (mean, logvar) -> tanh decoder -> item
// logits. The input is L2-normalized per user.
class MultVAE final : public TappableModel {
 public:
  explicit MultVAE(ModelSpec spec) : TappableModel(std::move(spec)) {
    Rng rng(spec_.seed, 0x7661);
    Eigen::Index in = static_cast<Eigen::Index>(spec_.n_items);
    const auto& hw = spec_.hidden_widths;
    for (std::size_t l = 0; l < hw.size(); ++l) {
      const auto w = static_cast<Eigen::Index>(hw[l]);
      const auto tag = "enc_h" + std::to_string(l + 1);
      // The first encoder matrix is the item-embedding table of this model.
      enc_.push_back({add_param(tag + ".weight", l == 0 ? "embeddings" : "hidden", in, w, rng),
                      add_param(tag + ".bias", "hidden", 1, w, rng, true)});
      add_tap(tag, hw[l], "encoder hidden layer " + std::to_string(l + 1) + " (tanh)");
      in = w;
    }
    const auto latent = static_cast<Eigen::Index>(spec_.latent_dim);
    mu_w_ = add_param("latent_mean.weight", "hidden", in, latent, rng);
    mu_b_ = add_param("latent_mean.bias", "hidden", 1, latent, rng, true);
    lv_w_ = add_param("latent_logvar.weight", "hidden", in, latent, rng);
    lv_b_ = add_param("latent_logvar.bias", "hidden", 1, latent, rng, true);
    add_tap("latent_mean", spec_.latent_dim, "posterior mean of the user latent");
    add_tap("latent_logvar", spec_.latent_dim, "posterior log-variance of the user latent");
    add_tap("latent_sample", spec_.latent_dim, "reparameterized latent sample (mean when no noise)");
    in = latent;
    for (std::size_t l = 0; l < hw.size(); ++l) {
      const auto w = static_cast<Eigen::Index>(hw[hw.size() - 1 - l]);
      const auto tag = "dec_h" + std::to_string(l + 1);
      dec_.push_back({add_param(tag + ".weight", "hidden", in, w, rng), add_param(tag + ".bias", "hidden", 1, w, rng, true)});
      add_tap(tag, static_cast<std::size_t>(w), "decoder hidden layer " + std::to_string(l + 1) + " (tanh)");
      in = w;
    }
    out_w_ = add_param("out.weight", "output", in, static_cast<Eigen::Index>(spec_.n_items), rng);
    out_b_ = add_param("out.bias", "output", 1, static_cast<Eigen::Index>(spec_.n_items), rng, true);
    default_tap_ = "latent_mean";
  }

  Graph build(Tape& t, const Batch& batch) const override {
    const Matrix& hist = batch.targets;
    if (static_cast<std::size_t>(hist.cols()) != spec_.n_items || static_cast<std::size_t>(hist.rows()) != batch.size()) {
      throw ValidationError("multvae batch targets must be batch x n_items");
    }
    for (auto u : batch.users) {
      if (u >= spec_.n_users) throw ValidationError("user index " + std::to_string(u) + " out of range");
    }
    Matrix x = hist;
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const double n = x.row(r).norm();
      if (n > 0) x.row(r) /= n;
    }
    Graph g;
    auto h = t.constant(std::move(x));
    for (std::size_t l = 0; l < enc_.size(); ++l) {
      h = t.tanh(dense(t, h, enc_[l].first, enc_[l].second));
      g.taps.emplace_back("enc_h" + std::to_string(l + 1), h);
    }
    auto mean = dense(t, h, mu_w_, mu_b_);
    auto logvar = dense(t, h, lv_w_, lv_b_);
    g.taps.emplace_back("latent_mean", mean);
    g.taps.emplace_back("latent_logvar", logvar);
    auto z = mean;
    if (batch.noise.size() != 0) {
      if (batch.noise.rows() != t.value(mean).rows() || batch.noise.cols() != t.value(mean).cols()) {
        throw ValidationError("multvae noise must be batch x latent_dim");
      }
      z = t.add(mean, t.hadamard(t.exp(t.scale(logvar, 0.5)), t.constant(batch.noise)));
    }
    g.taps.emplace_back("latent_sample", z);
    for (std::size_t l = 0; l < dec_.size(); ++l) {
      z = t.tanh(dense(t, z, dec_[l].first, dec_[l].second));
      g.taps.emplace_back("dec_h" + std::to_string(l + 1), z);
    }
    g.output = dense(t, z, out_w_, out_b_);
    g.kl = t.kl_standard_normal(mean, logvar);
    return g;
  }

 private:
  std::vector<std::pair<std::size_t, std::size_t>> enc_, dec_;
  std::size_t mu_w_, mu_b_, lv_w_, lv_b_, out_w_, out_b_;
};

// User/item field embeddings -> cross network (x_{l+1} = x0 * (x_l . w_l) +
// b_l + x_l) in parallel with a ReLU MLP; both stacked into a sigmoid head.
class DCN final : public TappableModel {
 public:
  explicit DCN(ModelSpec spec) : TappableModel(std::move(spec)) {
    Rng rng(spec_.seed, 0x6463);
    const auto d = static_cast<Eigen::Index>(spec_.embedding_dim);
    user_ = add_param("field_user", "embeddings", static_cast<Eigen::Index>(spec_.n_users), d, rng);
    item_ = add_param("field_item", "embeddings", static_cast<Eigen::Index>(spec_.n_items), d, rng);
    const Eigen::Index x0 = 2 * d;
    for (std::size_t l = 0; l < spec_.cross_layers; ++l) {
      const auto tag = "cross_" + std::to_string(l + 1);
      cross_.push_back({add_param(tag + ".weight", "hidden", x0, 1, rng), add_param(tag + ".bias", "hidden", 1, x0, rng, true)});
      add_tap(tag, static_cast<std::size_t>(x0), "cross layer " + std::to_string(l + 1));
    }
    Eigen::Index in = x0;
    for (std::size_t l = 0; l < spec_.hidden_widths.size(); ++l) {
      const auto w = static_cast<Eigen::Index>(spec_.hidden_widths[l]);
      const auto tag = "deep_h" + std::to_string(l + 1);
      deep_.push_back({add_param(tag + ".weight", "hidden", in, w, rng), add_param(tag + ".bias", "hidden", 1, w, rng, true)});
      add_tap(tag, spec_.hidden_widths[l], "deep layer " + std::to_string(l + 1) + " (ReLU)");
      in = w;
    }
    const auto stack = static_cast<std::size_t>(x0) + spec_.hidden_widths.back();
    add_tap("stack", stack, "concatenation of cross output and deep output");
    out_w_ = add_param("out.weight", "output", static_cast<Eigen::Index>(stack), 1, rng);
    out_b_ = add_param("out.bias", "output", 1, 1, rng, true);
    default_tap_ = "deep_h" + std::to_string(spec_.hidden_widths.size());
  }

  Graph build(Tape& t, const Batch& batch) const override {
    check_pairwise_batch(batch);
    Graph g;
    auto x0 = t.concat_cols({t.gather_rows(p(t, user_), batch.users), t.gather_rows(p(t, item_), batch.items)});
    auto xl = x0;
    for (std::size_t l = 0; l < cross_.size(); ++l) {
      auto proj = t.matmul(xl, p(t, cross_[l].first));
      xl = t.add(t.add_row(t.mul_rows(x0, proj), p(t, cross_[l].second)), xl);
      g.taps.emplace_back("cross_" + std::to_string(l + 1), xl);
    }
    auto h = x0;
    for (std::size_t l = 0; l < deep_.size(); ++l) {
      h = t.relu(dense(t, h, deep_[l].first, deep_[l].second));
      g.taps.emplace_back("deep_h" + std::to_string(l + 1), h);
    }
    auto stack = t.concat_cols({xl, h});
    g.taps.emplace_back("stack", stack);
    g.output = dense(t, stack, out_w_, out_b_);
    return g;
  }

 private:
  std::size_t user_, item_, out_w_, out_b_;
  std::vector<std::pair<std::size_t, std::size_t>> cross_, deep_;
};

// Factorization machine (first + second order) plus a ReLU MLP on the shared
// field embeddings; the three terms are summed into one logit.
class DeepFM final : public TappableModel {
 public:
  explicit DeepFM(ModelSpec spec) : TappableModel(std::move(spec)) {
    Rng rng(spec_.seed, 0x6466);
    const auto d = static_cast<Eigen::Index>(spec_.embedding_dim);
    user_v_ = add_param("field_user", "embeddings", static_cast<Eigen::Index>(spec_.n_users), d, rng);
    item_v_ = add_param("field_item", "embeddings", static_cast<Eigen::Index>(spec_.n_items), d, rng);
    user_w_ = add_param("first_order_user", "embeddings", static_cast<Eigen::Index>(spec_.n_users), 1, rng, true);
    item_w_ = add_param("first_order_item", "embeddings", static_cast<Eigen::Index>(spec_.n_items), 1, rng, true);
    add_tap("fm_interaction", spec_.embedding_dim, "second-order FM term before summation");
    Eigen::Index in = 2 * d;
    for (std::size_t l = 0; l < spec_.hidden_widths.size(); ++l) {
      const auto w = static_cast<Eigen::Index>(spec_.hidden_widths[l]);
      const auto tag = "deep_h" + std::to_string(l + 1);
      deep_.push_back({add_param(tag + ".weight", "hidden", in, w, rng), add_param(tag + ".bias", "hidden", 1, w, rng, true)});
      add_tap(tag, spec_.hidden_widths[l], "deep layer " + std::to_string(l + 1) + " (ReLU)");
      in = w;
    }
    deep_out_ = add_param("deep_out.weight", "output", in, 1, rng);
    bias_ = add_param("bias", "output", 1, 1, rng, true);
    default_tap_ = "deep_h" + std::to_string(spec_.hidden_widths.size());
  }

  Graph build(Tape& t, const Batch& batch) const override {
    check_pairwise_batch(batch);
    Graph g;
    auto vu = t.gather_rows(p(t, user_v_), batch.users);
    auto vi = t.gather_rows(p(t, item_v_), batch.items);
    // With two fields, 0.5 * ((sum v)^2 - sum v^2) reduces to vu * vi.
    auto fm_vec = t.hadamard(vu, vi);
    g.taps.emplace_back("fm_interaction", fm_vec);
    auto first = t.add(t.gather_rows(p(t, user_w_), batch.users), t.gather_rows(p(t, item_w_), batch.items));
    auto h = t.concat_cols({vu, vi});
    for (std::size_t l = 0; l < deep_.size(); ++l) {
      h = t.relu(dense(t, h, deep_[l].first, deep_[l].second));
      g.taps.emplace_back("deep_h" + std::to_string(l + 1), h);
    }
    auto deep = t.matmul(h, p(t, deep_out_));
    g.output = t.add_row(t.add(t.add(first, t.row_sum(fm_vec)), deep), p(t, bias_));
    return g;
  }

 private:
  std::size_t user_v_, item_v_, user_w_, item_w_, deep_out_, bias_;
  std::vector<std::pair<std::size_t, std::size_t>> deep_;
};

inline std::unique_ptr<TappableModel> create_model(const ModelSpec& spec) {
  spec.validate();
  switch (spec.kind) {
    case ModelKind::neumf: return std::make_unique<NeuMF>(spec);
    case ModelKind::multvae: return std::make_unique<MultVAE>(spec);
    case ModelKind::dcn: return std::make_unique<DCN>(spec);
    case ModelKind::deepfm: return std::make_unique<DeepFM>(spec);
  }
  throw ValidationError("unknown model kind");
}

inline std::vector<TapPoint> list_tap_points(const TappableModel& model) { return model.tap_points(); }

struct ForwardOutput {
  Matrix predictions;
  std::vector<TapActivation> captures;
};

// Runs the model on a batch and captures the named taps.
inline ForwardOutput forward(const TappableModel& model, const Batch& batch, const std::vector<std::string>& capture = {}) {
  Tape tape;
  Graph g = model.build(tape, batch);
  ForwardOutput out{model.predictions(tape, g), {}};
  for (const auto& name : capture) {
    const TapPoint* tp = model.find_tap(name);
    if (!tp) throw ValidationError("unknown tap '" + name + "'");
    out.captures.push_back({*tp, tape.value(g.tap(name))});
  }
  return out;
}

// Builds the model's own loss on the tape.
inline Tape::Var model_loss_node(Tape& tape, const TappableModel& model, const Graph& g, const Batch& batch,
                                 ModelLossKind kind) {
  switch (kind) {
    case ModelLossKind::bce:
      if (!model.pairwise()) throw ValidationError("bce loss needs a pairwise model");
      for (Eigen::Index i = 0; i < batch.targets.size(); ++i) {
        if (batch.targets(i) != 0.0 && batch.targets(i) != 1.0) throw ValidationError("bce targets must be 0 or 1");
      }
      return tape.bce_with_logits(g.output, batch.targets);
    case ModelLossKind::mse:
      if (!model.pairwise()) throw ValidationError("mse loss needs a pairwise model");
      return tape.mse(tape.sigmoid(g.output), batch.targets);
    case ModelLossKind::multinomial_nll: {
      if (model.pairwise()) throw ValidationError("multinomial_nll loss needs multvae");
      auto nll = tape.multinomial_nll(g.output, batch.targets);
      return tape.weighted_sum(nll, 1.0, g.kl, model.spec().kl_beta);
    }
  }
  throw ValidationError("unknown model loss");
}

// Loss on materialized predictions. bce takes probabilities (converted to
// logits clamped at +-30); multinomial_nll takes item logits, with
// beta * kl added.
inline double model_loss(const Matrix& predictions, const Matrix& targets, ModelLossKind kind, double kl = 0.0,
                         double beta = 0.0) {
  if (predictions.rows() != targets.rows() || predictions.cols() != targets.cols()) {
    throw DimensionError("model_loss: prediction/target shape mismatch");
  }
  switch (kind) {
    case ModelLossKind::bce: {
      double acc = 0.0;
      for (Eigen::Index i = 0; i < predictions.size(); ++i) {
        const double t = targets(i);
        if (t != 0.0 && t != 1.0) throw ValidationError("bce targets must be 0 or 1");
        const double p = predictions(i);
        double z = (p <= 0.0) ? -Tape::kLogitClamp : (p >= 1.0 ? Tape::kLogitClamp : std::log(p) - std::log1p(-p));
        z = std::clamp(z, -Tape::kLogitClamp, Tape::kLogitClamp);
        acc += Tape::softplus(z) - t * z;
      }
      return acc / static_cast<double>(predictions.size());
    }
    case ModelLossKind::mse:
      return (predictions - targets).squaredNorm() / static_cast<double>(predictions.size());
    case ModelLossKind::multinomial_nll: {
      for (Eigen::Index i = 0; i < targets.size(); ++i) {
        if (targets(i) < 0.0) throw ValidationError("multinomial_nll targets must be nonnegative");
      }
      const Matrix ls = Tape::log_softmax_rows(predictions);
      return -(targets.cwiseProduct(ls)).sum() / static_cast<double>(predictions.rows()) + beta * kl;
    }
  }
  throw ValidationError("unknown model loss");
}

// ---- checkpoints -------------------------------------------------------------

inline nlohmann::json checkpoint_json(const TappableModel& model) {
  nlohmann::json params = nlohmann::json::array();
  for (const auto& p : model.parameters()) {
    std::vector<double> data;
    data.reserve(static_cast<std::size_t>(p.value.size()));
    for (Eigen::Index r = 0; r < p.value.rows(); ++r)
      for (Eigen::Index c = 0; c < p.value.cols(); ++c) data.push_back(p.value(r, c));
    params.push_back({{"name", p.name}, {"group", p.group}, {"rows", p.value.rows()}, {"cols", p.value.cols()}, {"data", data}});
  }
  return {{"format", "llmkt-checkpoint"}, {"version", 1}, {"spec", model.spec().to_json()},
          {"seed", model.spec().seed}, {"parameters", params}};
}

inline void save_checkpoint(const TappableModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeFailure("cannot write checkpoint: " + path);
  out << checkpoint_json(model).dump() << '\n';
  if (!out) throw RuntimeFailure("write failed: " + path);
}

inline std::unique_ptr<TappableModel> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint: " + path);
  nlohmann::json j;
  try {
    in >> j;
    if (j.at("format") != "llmkt-checkpoint") throw ValidationError("not an llmkt checkpoint: " + path);
    auto model = create_model(ModelSpec::from_json(j.at("spec")));
    const auto& params = j.at("parameters");
    auto& mine = model->parameters();
    if (params.size() != mine.size()) throw ValidationError("checkpoint parameter count mismatch");
    for (std::size_t k = 0; k < mine.size(); ++k) {
      const auto& pj = params[k];
      auto& p = mine[k];
      const auto rows = pj.at("rows").get<Eigen::Index>();
      const auto cols = pj.at("cols").get<Eigen::Index>();
      if (pj.at("name") != p.name || rows != p.value.rows() || cols != p.value.cols()) {
        throw ValidationError("checkpoint parameter '" + p.name + "' does not match the model");
      }
      const auto data = pj.at("data").get<std::vector<double>>();
      if (static_cast<Eigen::Index>(data.size()) != rows * cols) throw ValidationError("checkpoint data size mismatch");
      for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) p.value(r, c) = data[static_cast<std::size_t>(r * cols + c)];
    }
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed checkpoint: ") + e.what());
  }
}

}  // namespace llmkt
