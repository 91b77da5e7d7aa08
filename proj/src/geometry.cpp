#include "geomf/geometry.hpp"

#include <cmath>
#include <numbers>
#include <random>

namespace geomf {

Mat3 mat3_identity() { return {Vec3{1, 0, 0}, Vec3{0, 1, 0}, Vec3{0, 0, 1}}; }

Mat3 mat3_mul(const Mat3& a, const Mat3& b) {
  Mat3 c{};
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k)
      for (int j = 0; j < 3; ++j) c[i][j] += a[i][k] * b[k][j];
  return c;
}

Mat3 mat3_transpose(const Mat3& a) {
  Mat3 t{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) t[i][j] = a[j][i];
  return t;
}

Vec3 mat3_apply(const Mat3& a, const Vec3& v) {
  Vec3 out{};
  for (int i = 0; i < 3; ++i) out[i] = a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2];
  return out;
}

double mat3_det(const Mat3& a) {
  return a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0]) +
         a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
}

double norm(const Vec3& v) { return std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]); }

SymmetricEigen symmetric_eigen(const Mat3& input) {
  Mat3 a = input;
  Mat3 v = mat3_identity();
  for (int sweep = 0; sweep < 64; ++sweep) {
    const double off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
    const double diag = a[0][0] * a[0][0] + a[1][1] * a[1][1] + a[2][2] * a[2][2];
    if (off == 0.0 || off <= 1e-36 * diag) break;
    for (int p = 0; p < 2; ++p) {
      for (int q = p + 1; q < 3; ++q) {
        if (a[p][q] == 0.0) continue;
        const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        // a ← Jᵀ a J with the Givens rotation J acting on (p, q).
        for (int k = 0; k < 3; ++k) {
          const double akp = a[k][p];
          const double akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (int k = 0; k < 3; ++k) {
          const double apk = a[p][k];
          const double aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
        for (int k = 0; k < 3; ++k) {
          const double vkp = v[k][p];
          const double vkq = v[k][q];
          v[k][p] = c * vkp - s * vkq;
          v[k][q] = s * vkp + c * vkq;
        }
      }
    }
  }
  return {Vec3{a[0][0], a[1][1], a[2][2]}, v};
}

void MolecularSystem::validate(std::size_t vocab) const {
  if (positions.empty()) throw ValidationError("system needs at least one particle");
  if (types.size() != positions.size()) {
    throw ValidationError("system has " + std::to_string(types.size()) + " type ids for " +
                          std::to_string(positions.size()) + " positions");
  }
  if (velocities && velocities->size() != positions.size()) {
    throw ValidationError("velocity count does not match particle count");
  }
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (types[i] >= vocab) {
      throw ValidationError("type id " + std::to_string(types[i]) + " at particle " + std::to_string(i) +
                            " outside vocabulary of " + std::to_string(vocab));
    }
    for (double x : positions[i]) {
      if (!std::isfinite(x)) throw ValidationError("non-finite position at particle " + std::to_string(i));
    }
    if (velocities) {
      for (double x : (*velocities)[i]) {
        if (!std::isfinite(x)) throw ValidationError("non-finite velocity at particle " + std::to_string(i));
      }
    }
  }
}

void RigidMotion::validate() const {
  const Mat3 rtr = mat3_mul(mat3_transpose(R), R);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      if (std::abs(rtr[i][j] - (i == j ? 1.0 : 0.0)) > 1e-10) throw ValidationError("rotation matrix is not orthogonal");
    }
  }
  if (det_sign != 1 && det_sign != -1) throw ValidationError("det_sign must be ±1");
  if (std::abs(mat3_det(R) - det_sign) > 1e-10) {
    throw ValidationError("rotation determinant " + std::to_string(mat3_det(R)) + " does not match det_sign " +
                          std::to_string(det_sign));
  }
}

MolecularSystem apply_rigid_motion(const MolecularSystem& sys, const RigidMotion& g) {
  g.validate();
  MolecularSystem out = sys;
  for (Vec3& r : out.positions) {
    r = mat3_apply(g.R, r);
    for (int k = 0; k < 3; ++k) r[k] += g.t[k];
  }
  if (out.velocities) {
    for (Vec3& v : *out.velocities) v = mat3_apply(g.R, v);
  }
  return out;
}

RigidMotion random_rotation(std::uint64_t seed, bool allow_reflection) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  double q[4];
  double len = 0.0;
  do {
    for (double& x : q) x = normal(rng);
    len = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
  } while (len < 1e-12);
  const double w = q[0] / len, x = q[1] / len, y = q[2] / len, z = q[3] / len;
  RigidMotion g;
  g.R = {Vec3{1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)},
         Vec3{2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)},
         Vec3{2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)}};
  for (double& t : g.t) t = normal(rng);
  if (allow_reflection && std::bernoulli_distribution(0.5)(rng)) {
    for (double& e : g.R[0]) e = -e;
    g.det_sign = -1;
  }
  return g;
}

std::vector<Vec3> mean_center(std::span<const Vec3> positions) {
  Vec3 c{0, 0, 0};
  for (const Vec3& r : positions)
    for (int k = 0; k < 3; ++k) c[k] += r[k];
  const double inv = positions.empty() ? 0.0 : 1.0 / static_cast<double>(positions.size());
  for (double& x : c) x *= inv;
  std::vector<Vec3> out(positions.begin(), positions.end());
  for (Vec3& r : out)
    for (int k = 0; k < 3; ++k) r[k] -= c[k];
  return out;
}

std::vector<double> pairwise_distances(std::span<const Vec3> positions) {
  const std::size_t n = positions.size();
  std::vector<double> d(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const Vec3 diff{positions[i][0] - positions[j][0], positions[i][1] - positions[j][1],
                      positions[i][2] - positions[j][2]};
      d[i * n + j] = d[j * n + i] = norm(diff);
    }
  }
  return d;
}

GaussianBasisParams init_gaussian_basis(std::size_t kernels, std::size_t slots, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> centers(0.0, 3.0);
  std::uniform_real_distribution<double> widths(0.5, 3.0);
  std::vector<double> mu(kernels), sigma(kernels);
  for (std::size_t k = 0; k < kernels; ++k) {
    mu[k] = centers(rng);
    sigma[k] = widths(rng);
  }
  return {Tensor({kernels}, std::move(mu)), Tensor({kernels}, std::move(sigma)), Tensor::full({slots, 1}, 1.0),
          Tensor({slots, 1})};
}

namespace {

constexpr double kInvSqrt2Pi = 0.3989422804014327;

double clamp_sigma(double s) { return std::max(std::abs(s), kMinSigma); }

}  // namespace

std::vector<double> gaussian_basis(double x, std::size_t slot, const GaussianBasisParams& params) {
  if (slot >= params.slots()) throw IndexError("gaussian basis slot " + std::to_string(slot) + " out of range");
  const double g = params.gamma[slot];
  const double b = params.beta[slot];
  std::vector<double> out(params.kernels());
  for (std::size_t k = 0; k < out.size(); ++k) {
    const double s = clamp_sigma(params.sigma[k]);
    const double u = (g * x + b - params.mu[k]) / s;
    out[k] = -kInvSqrt2Pi / s * std::exp(-0.5 * u * u);
  }
  return out;
}

Tensor gaussian_basis(const Tensor& x, const Tensor& gamma, const Tensor& beta, const Tensor& mu,
                      const Tensor& sigma) {
  const std::size_t m = x.size();
  const std::size_t kernels = mu.size();
  if (x.rank() != 1 || gamma.shape() != x.shape() || beta.shape() != x.shape() || mu.rank() != 1 ||
      sigma.shape() != mu.shape()) {
    throw DimensionError("gaussian_basis: expected x, γ, β of shape [M] and μ, σ of shape [K]");
  }
  auto xv = x.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  auto mv = mu.values();
  auto sv = sigma.values();
  std::vector<double> out(m * kernels);
  for (std::size_t i = 0; i < m; ++i) {
    const double shifted = gv[i] * xv[i] + bv[i];
    for (std::size_t k = 0; k < kernels; ++k) {
      const double s = clamp_sigma(sv[k]);
      const double u = (shifted - mv[k]) / s;
      out[i * kernels + k] = -kInvSqrt2Pi / s * std::exp(-0.5 * u * u);
    }
  }
  Tensor result({m, kernels}, std::move(out));
  return record_op(result, {&x, &gamma, &beta, &mu, &sigma}, [&] {
    return [x = x.detach(), gamma = gamma.detach(), beta = beta.detach(), mu = mu.detach(), sigma = sigma.detach(),
            psi = result.detach(), m, kernels](std::span<const double> g, GradientSink& in) {
      auto gx = in[0];
      auto gg = in[1];
      auto gb = in[2];
      auto gm = in[3];
      auto gs = in[4];
      auto xv = x.values();
      auto gv = gamma.values();
      auto bv = beta.values();
      auto mv = mu.values();
      auto sv = sigma.values();
      auto pv = psi.values();
      for (std::size_t i = 0; i < m; ++i) {
        const double shifted = gv[i] * xv[i] + bv[i];
        double d_shifted = 0.0;
        for (std::size_t k = 0; k < kernels; ++k) {
          const std::size_t idx = i * kernels + k;
          const double s = clamp_sigma(sv[k]);
          const double u = (shifted - mv[k]) / s;
          // ∂ψ/∂u = −u·ψ, ∂u/∂shifted = 1/s, ∂ψ/∂s = ψ(u² − 1)/s.
          const double du = -u * pv[idx] * g[idx] / s;
          d_shifted += du;
          if (!gm.empty()) gm[k] -= du;
          if (!gs.empty() && std::abs(sv[k]) > kMinSigma) {
            const double sign = sv[k] > 0 ? 1.0 : -1.0;
            gs[k] += sign * g[idx] * pv[idx] * (u * u - 1.0) / s;
          }
        }
        if (!gx.empty()) gx[i] += d_shifted * gv[i];
        if (!gg.empty()) gg[i] += d_shifted * xv[i];
        if (!gb.empty()) gb[i] += d_shifted;
      }
    };
  });
}

Tensor structural_bias(const Tensor& distances, std::span<const std::size_t> pair_ids, const GaussianBasisParams& params,
                       const Tensor& w_d1, const Tensor& w_d2) {
  const std::size_t m = distances.size();
  if (pair_ids.size() != m) throw DimensionError("structural_bias: one pair id per distance entry required");
  if (w_d1.rank() != 2 || w_d1.dim(0) != params.kernels() || w_d2.rank() != 2 || w_d2.dim(0) != w_d1.dim(1) ||
      w_d2.dim(1) != 1) {
    throw DimensionError("structural_bias: projections must be K×K and K×1, got " + to_string(w_d1.shape()) + " and " +
                         to_string(w_d2.shape()));
  }
  const Tensor gamma = reshape(gather_rows(params.gamma, pair_ids), {m});
  const Tensor beta = reshape(gather_rows(params.beta, pair_ids), {m});
  const Tensor psi = gaussian_basis(reshape(distances, {m}), gamma, beta, params.mu, params.sigma);
  const Tensor b = linear(gelu(linear(psi, w_d1)), w_d2);
  return reshape(b, distances.shape());
}

}  // namespace geomf
