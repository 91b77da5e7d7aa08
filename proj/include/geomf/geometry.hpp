#pragma once

// Molecular systems, rigid motions and the Gaussian basis featurisation of
// scalar geometric quantities (norms, distances).

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "geomf/tensor.hpp"

namespace geomf {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<Vec3, 3>;

Mat3 mat3_identity();
Mat3 mat3_mul(const Mat3& a, const Mat3& b);
Mat3 mat3_transpose(const Mat3& a);
Vec3 mat3_apply(const Mat3& a, const Vec3& v);
double mat3_det(const Mat3& a);
double norm(const Vec3& v);

/// Eigen-decomposition of a symmetric 3×3 matrix by cyclic Jacobi sweeps.
/// Column k of `vectors` is the unit eigenvector of values[k].
struct SymmetricEigen {
  Vec3 values;
  Mat3 vectors;
};
SymmetricEigen symmetric_eigen(const Mat3& a);

struct MolecularSystem {
  std::vector<std::size_t> types;
  std::vector<Vec3> positions;
  std::optional<std::vector<Vec3>> velocities;

  std::size_t size() const { return positions.size(); }
  /// Throws ValidationError unless n ≥ 1, entries are finite, array lengths
  /// agree and every type id is below `vocab`.
  void validate(std::size_t vocab) const;
};

/// Group element x ↦ R·x + t.
struct RigidMotion {
  Mat3 R = mat3_identity();
  Vec3 t{0.0, 0.0, 0.0};
  int det_sign = 1;

  static RigidMotion identity() { return {}; }
  /// Throws ValidationError unless RᵀR = I and det R = det_sign within 1e-10.
  void validate() const;
};

/// Positions map to R·r + t, velocities to R·v.
MolecularSystem apply_rigid_motion(const MolecularSystem& sys, const RigidMotion& g);

/// Haar-uniform rotation from a normalised Gaussian quaternion and t ~ N(0, I).
/// With `allow_reflection`, the first axis is flipped with probability ½.
RigidMotion random_rotation(std::uint64_t seed, bool allow_reflection);

std::vector<Vec3> mean_center(std::span<const Vec3> positions);

/// Row-major n×n Euclidean distance matrix.
std::vector<double> pairwise_distances(std::span<const Vec3> positions);

constexpr double kMinSigma = 1e-6;

/// Centers μ and widths σ of K Gaussian kernels plus the affine input
/// transform (γ, β) indexed by atom type or ordered type pair.
struct GaussianBasisParams {
  Tensor mu;     // [K]
  Tensor sigma;  // [K]
  Tensor gamma;  // [slots×1]
  Tensor beta;   // [slots×1]

  std::size_t kernels() const { return mu.size(); }
  std::size_t slots() const { return gamma.size(); }
};

/// μ ~ U(0, 3), σ ~ U(0.5, 3), γ = 1, β = 0.
GaussianBasisParams init_gaussian_basis(std::size_t kernels, std::size_t slots, std::uint64_t seed);

/// ψₖ(x) = −exp(−½((γx + β − μₖ)/|σₖ|)²) / (√(2π)|σₖ|), |σₖ| clamped to ≥ kMinSigma.
std::vector<double> gaussian_basis(double x, std::size_t slot, const GaussianBasisParams& params);

/// Batched kernel responses [M×K] for scalars x[M] with per-row γ[M], β[M].
/// Differentiable in every argument.
Tensor gaussian_basis(const Tensor& x, const Tensor& gamma, const Tensor& beta, const Tensor& mu,
                      const Tensor& sigma);

/// Id of the ordered type pair (a, b) in a vocab²-slot table.
inline std::size_t type_pair_id(std::size_t a, std::size_t b, std::size_t vocab) { return a * vocab + b; }

/// B = GELU(ψ(D) W_D1) W_D2 for distances [..., n, n] and per-entry pair ids.
/// Returns a tensor shaped like `distances`.
Tensor structural_bias(const Tensor& distances, std::span<const std::size_t> pair_ids, const GaussianBasisParams& params,
                       const Tensor& w_d1, const Tensor& w_d2);

}  // namespace geomf
