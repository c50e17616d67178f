#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "llmkt/dataset.hpp"
#include "llmkt/error.hpp"
#include "llmkt/profile_store.hpp"
#include "llmkt/random.hpp"

namespace llmkt {

enum class TransMethod { identity, random_projection, pca };
enum class ReconstructionKind { rmse, mse, cosine_distance };

inline std::string to_string(TransMethod m) {
  switch (m) {
    case TransMethod::identity: return "identity";
    case TransMethod::random_projection: return "random_projection";
    case TransMethod::pca: return "pca";
  }
  return "?";
}

inline TransMethod parse_trans_method(const std::string& s) {
  if (s == "identity") return TransMethod::identity;
  if (s == "random_projection") return TransMethod::random_projection;
  if (s == "pca") return TransMethod::pca;
  throw ValidationError("unknown trans method '" + s + "' (expected identity, random_projection or pca)");
}

inline std::string to_string(ReconstructionKind k) {
  switch (k) {
    case ReconstructionKind::rmse: return "rmse";
    case ReconstructionKind::mse: return "mse";
    case ReconstructionKind::cosine_distance: return "cosine_distance";
  }
  return "?";
}

inline ReconstructionKind parse_reconstruction_kind(const std::string& s) {
  if (s == "rmse") return ReconstructionKind::rmse;
  if (s == "mse") return ReconstructionKind::mse;
  if (s == "cosine_distance" || s == "cosine") return ReconstructionKind::cosine_distance;
  throw ValidationError("unknown reconstruction loss '" + s + "' (expected rmse, mse or cosine_distance)");
}

// Non-learnable map from profile-embedding space (source_dim) into the
// representation space of a tapped layer (target_dim). Immutable once fitted.
class TransMap {
 public:
  TransMap() = default;

  TransMethod method() const { return method_; }
  std::size_t source_dim() const { return source_dim_; }
  std::size_t target_dim() const { return target_dim_; }
  std::uint64_t seed() const { return seed_; }
  // source_dim x target_dim; empty for identity.
  const Matrix& projection() const { return projection_; }
  // Centering vector (pca only).
  const Vector& mean() const { return mean_; }

  Vector apply(const Vector& p) const {
    if (static_cast<std::size_t>(p.size()) != source_dim_) {
      throw DimensionError("trans input has length " + std::to_string(p.size()) + ", expected " +
                           std::to_string(source_dim_));
    }
    switch (method_) {
      case TransMethod::identity: return p;
      case TransMethod::random_projection: return projection_.transpose() * p;
      case TransMethod::pca: return projection_.transpose() * (p - mean_);
    }
    return p;
  }

  // Row-wise application to an n x source_dim matrix.
  Matrix apply_rows(const Matrix& x) const {
    if (static_cast<std::size_t>(x.cols()) != source_dim_) {
      throw DimensionError("trans input has " + std::to_string(x.cols()) + " columns, expected " +
                           std::to_string(source_dim_));
    }
    switch (method_) {
      case TransMethod::identity: return x;
      case TransMethod::random_projection: return x * projection_;
      case TransMethod::pca: return (x.rowwise() - mean_.transpose()) * projection_;
    }
    return x;
  }

  nlohmann::json to_json() const {
    std::vector<double> params;
    params.reserve(static_cast<std::size_t>(projection_.size()));
    for (Eigen::Index r = 0; r < projection_.rows(); ++r)
      for (Eigen::Index c = 0; c < projection_.cols(); ++c) params.push_back(projection_(r, c));
    return {{"method", to_string(method_)},
            {"source_dim", source_dim_},
            {"target_dim", target_dim_},
            {"seed", seed_},
            {"rows", projection_.rows()},
            {"cols", projection_.cols()},
            {"parameters", params},
            {"mean", std::vector<double>(mean_.data(), mean_.data() + mean_.size())}};
  }

  static TransMap from_json(const nlohmann::json& j) {
    TransMap m;
    try {
      m.method_ = parse_trans_method(j.at("method").get<std::string>());
      m.source_dim_ = j.at("source_dim").get<std::size_t>();
      m.target_dim_ = j.at("target_dim").get<std::size_t>();
      m.seed_ = j.at("seed").get<std::uint64_t>();
      const auto rows = j.at("rows").get<Eigen::Index>();
      const auto cols = j.at("cols").get<Eigen::Index>();
      const auto params = j.at("parameters").get<std::vector<double>>();
      if (static_cast<Eigen::Index>(params.size()) != rows * cols) throw ValidationError("parameter count mismatch");
      m.projection_.resize(rows, cols);
      for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m.projection_(r, c) = params[static_cast<std::size_t>(r * cols + c)];
      const auto mean = j.at("mean").get<std::vector<double>>();
      m.mean_ = Eigen::Map<const Vector>(mean.data(), static_cast<Eigen::Index>(mean.size()));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("malformed trans map: ") + e.what());
    }
    if (m.method_ != TransMethod::identity &&
        (static_cast<std::size_t>(m.projection_.rows()) != m.source_dim_ ||
         static_cast<std::size_t>(m.projection_.cols()) != m.target_dim_)) {
      throw ValidationError("trans map projection shape does not match its dims");
    }
    if (m.method_ == TransMethod::pca && static_cast<std::size_t>(m.mean_.size()) != m.source_dim_) {
      throw ValidationError("pca trans map mean has wrong length");
    }
    return m;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw RuntimeFailure("cannot write trans map: " + path);
    out << to_json().dump() << '\n';
  }

  static TransMap load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open trans map: " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("malformed trans map: ") + e.what());
    }
    return from_json(j);
  }

 private:
  friend TransMap fit_trans(const Matrix&, std::size_t, TransMethod, std::uint64_t);

  TransMethod method_ = TransMethod::identity;
  std::size_t source_dim_ = 0;
  std::size_t target_dim_ = 0;
  std::uint64_t seed_ = 0;
  Matrix projection_;
  Vector mean_;
};

// Fits Trans on the rows of `embeddings` (n x d_P).
//   pca: mean-centering + top target_dim principal directions, each flipped so
//        its largest-magnitude component is positive.
//   random_projection: seeded Gaussian matrix scaled by 1/sqrt(target_dim).
//   identity: pass-through, requires d_P == target_dim.
inline TransMap fit_trans(const Matrix& embeddings, std::size_t target_dim, TransMethod method,
                          std::uint64_t seed) {
  const auto n = static_cast<std::size_t>(embeddings.rows());
  const auto d = static_cast<std::size_t>(embeddings.cols());
  if (n < 1) throw ValidationError("fit_trans needs at least one embedding");
  if (target_dim < 1) throw ValidationError("fit_trans target_dim must be >= 1");

  TransMap m;
  m.method_ = method;
  m.source_dim_ = d;
  m.target_dim_ = target_dim;
  m.seed_ = seed;

  switch (method) {
    case TransMethod::identity:
      if (d != target_dim) {
        throw DimensionError("identity trans requires equal dims, got " + std::to_string(d) + " -> " +
                             std::to_string(target_dim));
      }
      break;
    case TransMethod::random_projection: {
      Rng rng(seed, 0x7270);
      const double scale = 1.0 / std::sqrt(static_cast<double>(target_dim));
      m.projection_.resize(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(target_dim));
      for (Eigen::Index r = 0; r < m.projection_.rows(); ++r)
        for (Eigen::Index c = 0; c < m.projection_.cols(); ++c) m.projection_(r, c) = rng.normal() * scale;
      break;
    }
    case TransMethod::pca: {
      if (target_dim > std::min(n, d)) {
        throw ValidationError("pca target_dim " + std::to_string(target_dim) + " exceeds min(n, d_P) = " +
                              std::to_string(std::min(n, d)));
      }
      m.mean_ = embeddings.colwise().mean().transpose();
      const Matrix centered = embeddings.rowwise() - m.mean_.transpose();
      const Matrix cov = (centered.transpose() * centered) / static_cast<double>(n);
      Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
      if (eig.info() != Eigen::Success) throw RuntimeFailure("pca eigendecomposition failed");
      // Eigenvalues come back ascending.
      m.projection_.resize(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(target_dim));
      for (std::size_t k = 0; k < target_dim; ++k) {
        Vector dir = eig.eigenvectors().col(static_cast<Eigen::Index>(d - 1 - k));
        Eigen::Index arg = 0;
        dir.cwiseAbs().maxCoeff(&arg);
        if (dir(arg) < 0) dir = -dir;
        m.projection_.col(static_cast<Eigen::Index>(k)) = dir;
      }
      break;
    }
  }
  return m;
}

inline Vector apply_trans(const TransMap& map, const Vector& p) { return map.apply(p); }

namespace detail {

inline void check_reconstruction_shapes(const Matrix& z, const Matrix& p, const std::vector<char>& mask) {
  if (z.rows() != p.rows() || z.cols() != p.cols()) {
    throw DimensionError("reconstruction shapes differ: " + std::to_string(z.rows()) + "x" +
                         std::to_string(z.cols()) + " vs " + std::to_string(p.rows()) + "x" +
                         std::to_string(p.cols()));
  }
  if (mask.size() != static_cast<std::size_t>(z.rows())) throw DimensionError("mask length != batch size");
}

}  // namespace detail

// Masked reconstruction loss between tapped activations Z and aligned
// profiles. RMSE is the square root of the masked batch-mean squared error.
// An all-false mask gives 0.
inline double reconstruction_loss(const Matrix& z, const Matrix& p, const std::vector<char>& mask,
                                  ReconstructionKind kind) {
  detail::check_reconstruction_shapes(z, p, mask);
  std::size_t rows = 0;
  double acc = 0.0;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    if (!mask[static_cast<std::size_t>(r)]) continue;
    ++rows;
    if (kind == ReconstructionKind::cosine_distance) {
      const double nz = z.row(r).norm();
      const double np = p.row(r).norm();
      if (nz == 0.0 || np == 0.0) throw ValidationError("cosine reconstruction loss on a zero-norm row");
      acc += 1.0 - z.row(r).dot(p.row(r)) / (nz * np);
    } else {
      acc += (z.row(r) - p.row(r)).squaredNorm();
    }
  }
  if (rows == 0) return 0.0;
  if (kind == ReconstructionKind::cosine_distance) return acc / static_cast<double>(rows);
  const double mse = acc / static_cast<double>(rows * static_cast<std::size_t>(z.cols()));
  return kind == ReconstructionKind::mse ? mse : std::sqrt(mse);
}

// d loss / d Z for reconstruction_loss. Unmasked rows get zero gradient; at
// an exact RMSE of zero the (sub)gradient is taken as zero.
inline Matrix reconstruction_loss_grad(const Matrix& z, const Matrix& p, const std::vector<char>& mask,
                                       ReconstructionKind kind) {
  detail::check_reconstruction_shapes(z, p, mask);
  Matrix g = Matrix::Zero(z.rows(), z.cols());
  std::size_t rows = 0;
  for (char m : mask) rows += m ? 1 : 0;
  if (rows == 0) return g;
  if (kind == ReconstructionKind::cosine_distance) {
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
      if (!mask[static_cast<std::size_t>(r)]) continue;
      const double nz = z.row(r).norm();
      const double np = p.row(r).norm();
      if (nz == 0.0 || np == 0.0) throw ValidationError("cosine reconstruction loss on a zero-norm row");
      const double dot = z.row(r).dot(p.row(r));
      g.row(r) = -(p.row(r) / (nz * np) - z.row(r) * (dot / (nz * nz * nz * np))) / static_cast<double>(rows);
    }
    return g;
  }
  const double denom = static_cast<double>(rows * static_cast<std::size_t>(z.cols()));
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    if (mask[static_cast<std::size_t>(r)]) g.row(r) = 2.0 * (z.row(r) - p.row(r)) / denom;
  }
  if (kind == ReconstructionKind::rmse) {
    const double loss = reconstruction_loss(z, p, mask, kind);
    if (loss == 0.0) return Matrix::Zero(z.rows(), z.cols());
    g /= 2.0 * loss;
  }
  return g;
}

// alpha * l_kt + (1 - alpha) * l_model.
inline double combined_loss(double l_kt, double l_model, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("alpha must lie in [0, 1]");
  if (!std::isfinite(l_kt) || !std::isfinite(l_model)) throw ValidationError("combined_loss inputs must be finite");
  return alpha * l_kt + (1.0 - alpha) * l_model;
}

// Trans(P_u) for every user of an index map; users without a profile are
// masked out of the reconstruction loss.
struct AlignedProfiles {
  Matrix targets;          // n_users x target_dim
  std::vector<char> mask;  // n_users
  std::size_t dim() const { return static_cast<std::size_t>(targets.cols()); }
  std::size_t coverage() const {
    std::size_t c = 0;
    for (char m : mask) c += m ? 1 : 0;
    return c;
  }
};

// Stacks the embeddings of the given users that have one (rows in index
// order). Used to fit Trans on training users only.
inline Matrix gather_embeddings(const ProfileStore& store, const IdIndex& users,
                                const std::vector<std::uint32_t>& which) {
  std::vector<const std::vector<double>*> found;
  for (auto u : which) {
    if (auto* v = store.find(users.id(u))) found.push_back(v);
  }
  Matrix out(static_cast<Eigen::Index>(found.size()), static_cast<Eigen::Index>(store.dim()));
  for (std::size_t r = 0; r < found.size(); ++r)
    for (std::size_t c = 0; c < store.dim(); ++c) out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = (*found[r])[c];
  return out;
}

inline AlignedProfiles align_profiles(const ProfileStore& store, const IdIndex& users, const TransMap& map) {
  if (store.dim() != map.source_dim()) {
    throw DimensionError("profile store dim " + std::to_string(store.dim()) + " != trans source dim " +
                         std::to_string(map.source_dim()));
  }
  AlignedProfiles out;
  out.targets = Matrix::Zero(static_cast<Eigen::Index>(users.size()), static_cast<Eigen::Index>(map.target_dim()));
  out.mask.assign(users.size(), 0);
  for (std::uint32_t u = 0; u < users.size(); ++u) {
    const auto* v = store.find(users.id(u));
    if (!v) continue;
    const Vector p = Eigen::Map<const Vector>(v->data(), static_cast<Eigen::Index>(v->size()));
    out.targets.row(u) = map.apply(p).transpose();
    out.mask[u] = 1;
  }
  return out;
}

}  // namespace llmkt
