#pragma once

// Shared helpers for building random systems and comparing transformed outputs.

#include <cmath>
#include <random>
#include <vector>

#include "geomf/geometry.hpp"
#include "geomf/model.hpp"

namespace geomf::testing {

inline Tensor uniform_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(element_count(shape));
  for (double& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v));
}

inline MolecularSystem random_system(std::mt19937_64& rng, std::size_t n, std::size_t vocab, bool velocities) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> type(0, vocab - 1);
  MolecularSystem sys;
  for (std::size_t i = 0; i < n; ++i) {
    sys.types.push_back(type(rng));
    sys.positions.push_back({normal(rng), normal(rng), normal(rng)});
  }
  if (velocities) {
    std::vector<Vec3> v(n);
    for (Vec3& x : v) x = {normal(rng), normal(rng), normal(rng)};
    sys.velocities = v;
  }
  return sys;
}

/// R applied to every 3-vector of a [..., 3, d] tensor (axis rank−2 is spatial).
inline Tensor rotate_channels(const Tensor& z, const Mat3& r) {
  const std::size_t d = z.shape().back();
  const std::size_t rows = z.size() / (3 * d);
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t k = 0; k < d; ++k)
      for (std::size_t a = 0; a < 3; ++a) {
        double acc = 0.0;
        for (std::size_t b = 0; b < 3; ++b) acc += r[a][b] * z[(i * 3 + b) * d + k];
        out[(i * 3 + a) * d + k] = acc;
      }
  return Tensor(z.shape(), std::move(out));
}

/// g applied to points stored as a [..., 3] tensor.
inline Tensor move_points(const Tensor& p, const RigidMotion& g) {
  std::vector<double> out(p.size());
  for (std::size_t i = 0; i < p.size() / 3; ++i) {
    Vec3 x{p[3 * i], p[3 * i + 1], p[3 * i + 2]};
    Vec3 y = mat3_apply(g.R, x);
    for (int k = 0; k < 3; ++k) out[3 * i + k] = y[k] + g.t[k];
  }
  return Tensor(p.shape(), std::move(out));
}

/// out[i] = in[perm[i]] along the atom axis (axis 1) of a [1 × n × ...] tensor.
inline Tensor permute_atoms(const Tensor& z, const std::vector<std::size_t>& perm) {
  const std::size_t n = z.dim(1);
  const std::size_t row = z.size() / (z.dim(0) * n);
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < row; ++c) out[i * row + c] = z[perm[i] * row + c];
  return Tensor(z.shape(), std::move(out));
}

inline MolecularSystem permute_system(const MolecularSystem& sys, const std::vector<std::size_t>& perm) {
  MolecularSystem out;
  for (std::size_t i : perm) {
    out.types.push_back(sys.types[i]);
    out.positions.push_back(sys.positions[i]);
  }
  if (sys.velocities) {
    std::vector<Vec3> v;
    for (std::size_t i : perm) v.push_back((*sys.velocities)[i]);
    out.velocities = v;
  }
  return out;
}

/// ‖a − b‖ / (‖b‖ + 1e-12)
inline double relative_deviation(const Tensor& a, const Tensor& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num) / (std::sqrt(den) + 1e-12);
}

inline double max_abs_difference(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Small dropout-free configuration for symmetry and gradient tests.
inline ModelConfig tiny_config(std::uint64_t seed = 1) {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.width = 8;
  cfg.heads = 2;
  cfg.ffn_width = 8;
  cfg.kernels = 6;
  cfg.vocab = 2;
  cfg.dropout_embedding = cfg.dropout_attention = cfg.dropout_activation = cfg.dropout_hidden = 0.0;
  cfg.seed = seed;
  return cfg;
}

}  // namespace geomf::testing
