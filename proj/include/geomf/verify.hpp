#pragma once

// Randomised symmetry and gradient audits of a model, reported as
// newline-delimited JSON.

#include <cstdint>
#include <string>
#include <vector>

#include "geomf/model.hpp"

namespace geomf {

struct CheckResult {
  std::string name;
  std::size_t trials = 0;
  double max_deviation = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

struct SymmetryReport {
  std::uint64_t seed = 0;
  std::string config_hash;
  std::vector<CheckResult> rows;

  bool pass() const;
  /// One JSON object per row, then a summary line.
  std::string to_ndjson() const;
};

struct AuditOptions {
  std::size_t trials = 100;
  std::uint64_t seed = 0;
  std::size_t min_atoms = 2;
  std::size_t max_atoms = 6;
  /// Draw fresh parameters (with non-zero output projections) for every
  /// trial instead of using the model's own.
  bool fresh_parameters = false;
  /// Test-side defect for mutation testing: compare f(R·x) against f(x)
  /// instead of R·f(x).
  bool omit_output_rotation = false;
};

/// 64-bit FNV-1a of the canonical config JSON, as 16 hex digits.
std::string config_hash(const ModelConfig& cfg);

/// Largest relative deviation, over Zᴱ, predicted positions and Zᴵ, between
/// g applied to the outputs for `sys` and the outputs for g·sys. Zᴱ is
/// compared after rotation only, positions after the full motion, Zᴵ as is.
double rigid_motion_deviation(const ModelConfig& cfg, const ModelParams& params, const MolecularSystem& sys,
                              const RigidMotion& g);
/// Same for atom reordering: sys' atom i is sys atom perm[i].
double permutation_deviation(const ModelConfig& cfg, const ModelParams& params, const MolecularSystem& sys,
                             const std::vector<std::size_t>& perm);

/// Orthogonal transform with det −1 (translation included); index 0 is the
/// point inversion −I.
RigidMotion sample_reflection(std::uint64_t seed, std::size_t index);

/// ‖R·f(x) − f(R·x)‖ / (‖f(x)‖ + 1e-12) over Zᴱ and predicted positions.
CheckResult check_rotation_equivariance(const Model& model, const AuditOptions& opt = {}, double tol = 1e-8);

/// Three rows: Zᴱ under translation, Zᴵ under a full rigid motion, and
/// predicted positions shifting by t.
std::vector<CheckResult> check_translation(const Model& model, const AuditOptions& opt = {}, double tol = 1e-8);

/// Equivariance under det = −1 transforms, the point inversion −I among them.
/// Throws ModeError for SE3-mode models.
CheckResult check_reflection(const Model& model, const AuditOptions& opt = {}, double tol = 1e-8);

/// f(π·x) = π·f(x) for both streams and predicted positions.
CheckResult check_permutation(const Model& model, const AuditOptions& opt = {}, double tol = 1e-12);

/// One row per parameter tensor: max |g − fd| / max(|fd|, |g|, 1e-6) between
/// tape gradients and central differences (h = 1e-5) of an MSE loss on
/// positions and the invariant head. Throws ConfigError unless the model has
/// at most 2 blocks and width at most 8.
std::vector<CheckResult> check_gradients(const Model& model, std::uint64_t seed = 0, double tol = 1e-5);

struct AuditSelection {
  bool rotation = true;
  bool translation = true;
  /// Only honoured for E3-mode models.
  bool reflection = true;
  bool permutation = true;
  bool gradients = false;
};

/// Runs the selected checks, concurrently when threads > 1. Rows appear in a
/// fixed order regardless of threads.
SymmetryReport run_audit(const Model& model, const AuditOptions& opt, const AuditSelection& which = {},
                         unsigned threads = 1);

}  // namespace geomf
