#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "llmkt/error.hpp"
#include "llmkt/transfer.hpp"

namespace llmkt {

// A trainable array. `group` names the weights-manager group it belongs to.
struct Parameter {
  std::string name;
  std::string group;
  Matrix value;
};

// Reverse-mode tape over dense matrices. Scalars are 1x1 matrices. Each op
// records its value and a closure that pushes the output gradient to inputs.
class Tape {
 public:
  struct Var {
    std::size_t id = static_cast<std::size_t>(-1);
    bool valid() const { return id != static_cast<std::size_t>(-1); }
  };

  Var constant(Matrix v) { return push(std::move(v), false, nullptr); }

  // Leaf for parameter `index` of a model; the value is referenced, not copied.
  Var parameter(std::size_t index, const Matrix& value) {
    Node n;
    n.external = &value;
    n.requires_grad = true;
    n.param_index = index;
    nodes_.push_back(std::move(n));
    return {nodes_.size() - 1};
  }

  const Matrix& value(Var v) const {
    const auto& n = nodes_.at(v.id);
    return n.external ? *n.external : n.value;
  }
  double scalar(Var v) const { return value(v)(0, 0); }

  // Empty matrix when no gradient reached the node.
  const Matrix& grad(Var v) const { return nodes_.at(v.id).grad; }

  // Gradients for parameter leaves, indexed like the model's parameter list.
  std::vector<Matrix> parameter_grads(std::size_t n_params) const {
    std::vector<Matrix> out(n_params);
    for (const auto& n : nodes_) {
      if (n.param_index == kNoParam || n.grad.size() == 0) continue;
      auto& g = out.at(n.param_index);
      if (g.size() == 0) {
        g = n.grad;
      } else {
        g += n.grad;
      }
    }
    return out;
  }

  void backward(Var root) {
    if (value(root).size() != 1) throw Error("backward root must be a scalar");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    nodes_[root.id].grad = Matrix::Ones(1, 1);
    for (std::size_t i = root.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (n.grad.size() == 0 || !n.back) continue;
      n.back(*this, i);
    }
  }

  // ---- elementwise / linear ops -------------------------------------------

  Var matmul(Var a, Var b) {
    Matrix out = value(a) * value(b);
    return push(std::move(out), needs(a, b), [a, b](Tape& t, std::size_t self) {
      const Matrix& g = t.nodes_[self].grad;
      if (t.needs(a)) t.accumulate(a, g * t.value(b).transpose());
      if (t.needs(b)) t.accumulate(b, t.value(a).transpose() * g);
    });
  }

  Var add(Var a, Var b) {
    check_same(a, b, "add");
    Matrix out = value(a) + value(b);
    return push(std::move(out), needs(a, b), [a, b](Tape& t, std::size_t self) {
      const Matrix& g = t.nodes_[self].grad;
      if (t.needs(a)) t.accumulate(a, g);
      if (t.needs(b)) t.accumulate(b, g);
    });
  }

  // a (b x n) + bias (1 x n) broadcast over rows.
  Var add_row(Var a, Var bias) {
    if (value(bias).rows() != 1 || value(bias).cols() != value(a).cols()) throw DimensionError("add_row: bias shape");
    Matrix out = value(a).rowwise() + value(bias).row(0);
    return push(std::move(out), needs(a, bias), [a, bias](Tape& t, std::size_t self) {
      const Matrix& g = t.nodes_[self].grad;
      if (t.needs(a)) t.accumulate(a, g);
      if (t.needs(bias)) t.accumulate(bias, g.colwise().sum());
    });
  }

  Var hadamard(Var a, Var b) {
    check_same(a, b, "hadamard");
    Matrix out = value(a).cwiseProduct(value(b));
    return push(std::move(out), needs(a, b), [a, b](Tape& t, std::size_t self) {
      const Matrix& g = t.nodes_[self].grad;
      if (t.needs(a)) t.accumulate(a, g.cwiseProduct(t.value(b)));
      if (t.needs(b)) t.accumulate(b, g.cwiseProduct(t.value(a)));
    });
  }

  Var scale(Var a, double c) {
    Matrix out = value(a) * c;
    return push(std::move(out), needs(a), [a, c](Tape& t, std::size_t self) {
      t.accumulate(a, t.nodes_[self].grad * c);
    });
  }

  // a (b x n) scaled row-wise by c (b x 1).
  Var mul_rows(Var a, Var c) {
    if (value(c).cols() != 1 || value(c).rows() != value(a).rows()) throw DimensionError("mul_rows: scale shape");
    Matrix out = value(a).array().colwise() * value(c).col(0).array();
    return push(std::move(out), needs(a, c), [a, c](Tape& t, std::size_t self) {
      const Matrix& g = t.nodes_[self].grad;
      if (t.needs(a)) t.accumulate(a, (g.array().colwise() * t.value(c).col(0).array()).matrix());
      if (t.needs(c)) t.accumulate(c, g.cwiseProduct(t.value(a)).rowwise().sum());
    });
  }

  Var row_sum(Var a) {
    Matrix out = value(a).rowwise().sum();
    return push(std::move(out), needs(a), [a](Tape& t, std::size_t self) {
      const Matrix& g = t.nodes_[self].grad;
      const Matrix& x = t.value(a);
      t.accumulate(a, g.replicate(1, x.cols()));
    });
  }

  Var relu(Var a) {
    Matrix out = value(a).cwiseMax(0.0);
    return push(std::move(out), needs(a), [a](Tape& t, std::size_t self) {
      const Matrix& g = t.nodes_[self].grad;
      t.accumulate(a, (t.value(a).array() > 0.0).cast<double>().matrix().cwiseProduct(g));
    });
  }

  Var sigmoid(Var a) {
    Matrix out = value(a).unaryExpr([](double x) { return logistic(x); });
    return push(std::move(out), needs(a), [a](Tape& t, std::size_t self) {
      const Matrix& y = t.nodes_[self].value;
      const Matrix& g = t.nodes_[self].grad;
      t.accumulate(a, (g.array() * y.array() * (1.0 - y.array())).matrix());
    });
  }

  Var tanh(Var a) {
    Matrix out = value(a).array().tanh().matrix();
    return push(std::move(out), needs(a), [a](Tape& t, std::size_t self) {
      const Matrix& y = t.nodes_[self].value;
      const Matrix& g = t.nodes_[self].grad;
      t.accumulate(a, (g.array() * (1.0 - y.array().square())).matrix());
    });
  }

  Var exp(Var a) {
    Matrix out = value(a).array().exp().matrix();
    return push(std::move(out), needs(a), [a](Tape& t, std::size_t self) {
      t.accumulate(a, t.nodes_[self].grad.cwiseProduct(t.nodes_[self].value));
    });
  }

  Var concat_cols(const std::vector<Var>& parts) {
    Eigen::Index rows = value(parts.at(0)).rows();
    Eigen::Index cols = 0;
    bool rg = false;
    for (auto p : parts) {
      if (value(p).rows() != rows) throw DimensionError("concat_cols: row mismatch");
      cols += value(p).cols();
      rg = rg || needs(p);
    }
    Matrix out(rows, cols);
    Eigen::Index off = 0;
    for (auto p : parts) {
      out.middleCols(off, value(p).cols()) = value(p);
      off += value(p).cols();
    }
    return push(std::move(out), rg, [parts](Tape& t, std::size_t self) {
      const Matrix& g = t.nodes_[self].grad;
      Eigen::Index o = 0;
      for (auto p : parts) {
        const auto c = t.value(p).cols();
        if (t.needs(p)) t.accumulate(p, g.middleCols(o, c));
        o += c;
      }
    });
  }

  // Row lookup into an embedding table; gradient is scattered back.
  Var gather_rows(Var table, const std::vector<std::uint32_t>& idx) {
    const Matrix& tab = value(table);
    Matrix out(static_cast<Eigen::Index>(idx.size()), tab.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      if (idx[r] >= static_cast<std::size_t>(tab.rows())) throw ValidationError("gather_rows: index out of range");
      out.row(static_cast<Eigen::Index>(r)) = tab.row(idx[r]);
    }
    return push(std::move(out), needs(table), [table, idx](Tape& t, std::size_t self) {
      const Matrix& g = t.nodes_[self].grad;
      auto& tg = t.grad_slot(table);
      for (std::size_t r = 0; r < idx.size(); ++r) tg.row(idx[r]) += g.row(static_cast<Eigen::Index>(r));
    });
  }

  // ---- scalar losses ---------------------------------------------------------

  // Mean binary cross-entropy on logits clamped to [-30, 30].
  Var bce_with_logits(Var logits, const Matrix& targets) {
    const Matrix& z = value(logits);
    check_targets(z, targets, "bce");
    double acc = 0.0;
    for (Eigen::Index i = 0; i < z.size(); ++i) {
      const double x = std::clamp(z(i), -kLogitClamp, kLogitClamp);
      acc += softplus(x) - targets(i) * x;
    }
    const double n = static_cast<double>(z.size());
    return push(Matrix::Constant(1, 1, acc / n), needs(logits), [logits, targets, n](Tape& t, std::size_t self) {
      const double g = t.nodes_[self].grad(0, 0);
      const Matrix& z = t.value(logits);
      Matrix d(z.rows(), z.cols());
      for (Eigen::Index i = 0; i < z.size(); ++i) {
        const bool inside = z(i) > -kLogitClamp && z(i) < kLogitClamp;
        d(i) = inside ? g * (logistic(z(i)) - targets(i)) / n : 0.0;
      }
      t.accumulate(logits, d);
    });
  }

  Var mse(Var pred, const Matrix& targets) {
    const Matrix& p = value(pred);
    check_targets(p, targets, "mse");
    const double n = static_cast<double>(p.size());
    return push(Matrix::Constant(1, 1, (p - targets).squaredNorm() / n), needs(pred),
                [pred, targets, n](Tape& t, std::size_t self) {
                  const double g = t.nodes_[self].grad(0, 0);
                  t.accumulate(pred, (t.value(pred) - targets) * (2.0 * g / n));
                });
  }

  // -mean_u sum_i x_ui * log_softmax(logits_u)_i
  Var multinomial_nll(Var logits, const Matrix& targets) {
    const Matrix& z = value(logits);
    check_targets(z, targets, "multinomial_nll");
    Matrix log_softmax = log_softmax_rows(z);
    const double n = static_cast<double>(z.rows());
    const double loss = -(targets.cwiseProduct(log_softmax)).sum() / n;
    return push(Matrix::Constant(1, 1, loss), needs(logits),
                [logits, targets, log_softmax, n](Tape& t, std::size_t self) {
                  const double g = t.nodes_[self].grad(0, 0);
                  const Matrix softmax = log_softmax.array().exp().matrix();
                  const Vector row_mass = targets.rowwise().sum();
                  Matrix d = softmax.array().colwise() * row_mass.array();
                  d -= targets;
                  t.accumulate(logits, d * (g / n));
                });
  }

  // mean_u KL(N(mean, exp(logvar)) || N(0, I))
  Var kl_standard_normal(Var mean, Var logvar) {
    check_same(mean, logvar, "kl");
    const Matrix& m = value(mean);
    const Matrix& lv = value(logvar);
    const double n = static_cast<double>(m.rows());
    const double kl = -0.5 * (1.0 + lv.array() - m.array().square() - lv.array().exp()).sum() / n;
    return push(Matrix::Constant(1, 1, kl), needs(mean, logvar), [mean, logvar, n](Tape& t, std::size_t self) {
      const double g = t.nodes_[self].grad(0, 0);
      if (t.needs(mean)) t.accumulate(mean, t.value(mean) * (g / n));
      if (t.needs(logvar)) t.accumulate(logvar, (0.5 * (t.value(logvar).array().exp() - 1.0)).matrix() * (g / n));
    });
  }

  Var reconstruction(Var z, const Matrix& targets, const std::vector<char>& mask, ReconstructionKind kind) {
    const double loss = reconstruction_loss(value(z), targets, mask, kind);
    return push(Matrix::Constant(1, 1, loss), needs(z), [z, targets, mask, kind](Tape& t, std::size_t self) {
      const double g = t.nodes_[self].grad(0, 0);
      t.accumulate(z, reconstruction_loss_grad(t.value(z), targets, mask, kind) * g);
    });
  }

  // wa * a + wb * b for scalars. A zero weight does not propagate at all, so a
  // disabled term cannot perturb gradients.
  Var weighted_sum(Var a, double wa, Var b, double wb) {
    const double v = wa * scalar(a) + wb * scalar(b);
    return push(Matrix::Constant(1, 1, v), needs(a, b), [a, wa, b, wb](Tape& t, std::size_t self) {
      const Matrix& g = t.nodes_[self].grad;
      if (wa != 0.0 && t.needs(a)) t.accumulate(a, g * wa);
      if (wb != 0.0 && t.needs(b)) t.accumulate(b, g * wb);
    });
  }

  static constexpr double kLogitClamp = 30.0;

  static double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

  static Matrix log_softmax_rows(const Matrix& z) {
    Matrix out(z.rows(), z.cols());
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
      const double mx = z.row(r).maxCoeff();
      const double lse = mx + std::log((z.row(r).array() - mx).exp().sum());
      out.row(r) = z.row(r).array() - lse;
    }
    return out;
  }

 private:
  static constexpr std::size_t kNoParam = static_cast<std::size_t>(-1);

  struct Node {
    Matrix value;
    const Matrix* external = nullptr;
    Matrix grad;
    std::function<void(Tape&, std::size_t)> back;
    bool requires_grad = false;
    std::size_t param_index = kNoParam;
  };

  Var push(Matrix v, bool requires_grad, std::function<void(Tape&, std::size_t)> back) {
    Node n;
    n.value = std::move(v);
    n.requires_grad = requires_grad;
    if (requires_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return {nodes_.size() - 1};
  }

  bool needs(Var a) const { return nodes_[a.id].requires_grad; }
  bool needs(Var a, Var b) const { return needs(a) || needs(b); }

  Matrix& grad_slot(Var a) {
    auto& n = nodes_[a.id];
    if (n.grad.size() == 0) {
      const Matrix& v = value(a);
      n.grad = Matrix::Zero(v.rows(), v.cols());
    }
    return n.grad;
  }

  template <typename M>
  void accumulate(Var a, const M& g) {
    if (!needs(a)) return;
    grad_slot(a) += g;
  }

  void check_same(Var a, Var b, const char* op) const {
    if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols()) {
      throw DimensionError(std::string(op) + ": shape mismatch");
    }
  }

  static void check_targets(const Matrix& p, const Matrix& t, const char* op) {
    if (p.rows() != t.rows() || p.cols() != t.cols()) throw DimensionError(std::string(op) + ": target shape mismatch");
  }

  std::vector<Node> nodes_;
};

}  // namespace llmkt
