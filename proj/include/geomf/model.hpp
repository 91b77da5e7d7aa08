#pragma once

// The two-stream transformer: input layer, stacked blocks, layer norms,
// feed-forward networks, readout heads and checkpoint I/O.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "geomf/attention.hpp"
#include "geomf/geometry.hpp"
#include "geomf/tensor.hpp"

namespace geomf {

enum class SymmetryMode { kSE3, kE3 };

std::string to_string(SymmetryMode mode);
SymmetryMode parse_symmetry_mode(const std::string& text);

/// Deliberate defects used to show that the audits detect broken models.
enum class Mutation {
  kNone,
  kGeluOnEqu,               // pointwise GELU applied to Zᴱ after the input layer
  kUncenteredPositions,     // input layer reads raw instead of mean-centred positions
  kSpatialHeadSplit,        // equivariant heads split across the spatial axis
  kRawCoordinateBias,       // structural bias from |xᵢ − xⱼ| instead of distances
  kCorruptProductBackward,  // wrong backward rule for ⊙
};

std::string to_string(Mutation m);
Mutation parse_mutation(const std::string& text);

/// Per-module switches. A disabled sub-layer contributes zero to its residual;
/// a disabled norm is the identity.
struct AblationFlags {
  bool inv_self = true;
  bool equ_self = true;
  bool inv_cross = true;
  bool equ_cross = true;
  bool inv_ffn = true;
  bool equ_ffn = true;
  bool inv_ln = true;
  bool equ_ln = true;
  bool structural_bias = true;
  // Structural bias inside each attention module.
  bool bias_inv_self = true;
  bool bias_equ_self = true;
  bool bias_inv_cross = true;
  bool bias_equ_cross = true;

  bool operator==(const AblationFlags&) const = default;
};

struct ModelConfig {
  std::size_t layers = 4;
  std::size_t width = 80;
  std::size_t heads = 8;
  std::size_t ffn_width = 80;
  std::size_t kernels = 64;
  std::size_t vocab = 2;
  bool use_velocities = true;
  double dropout_embedding = 0.4;
  double dropout_attention = 0.4;
  double dropout_activation = 0.4;
  double dropout_hidden = 0.4;
  bool drop_path = false;
  double drop_path_rate = 0.4;
  SymmetryMode mode = SymmetryMode::kSE3;
  AblationFlags ablation;
  std::uint64_t seed = 0;
  /// Not persisted in checkpoints.
  Mutation mutation = Mutation::kNone;

  /// Throws ConfigError on d % H ≠ 0, odd d with velocities, zero sizes or
  /// rates outside [0, 1).
  void validate() const;
};

struct BlockParams {
  Tensor inv_ln_gamma[3], inv_ln_beta[3];  // [d]
  Tensor equ_ln_gamma[3];                  // [d]
  SelfAttentionParams inv_self, equ_self;
  CrossAttentionParams inv_cross, equ_cross;
  Tensor ffn_w1, ffn_w2;                  // d×r, r×d
  Tensor equ_up, equ_gate, equ_down;      // d×r, d×r, r×d
};

struct ModelParams {
  Tensor embedding;  // vocab×d
  GaussianBasisParams pos_basis, vel_basis;
  Tensor pos_proj, vel_proj;  // K×(d/2) with velocities, K×d without
  GaussianBasisParams pair_basis;
  Tensor bias_w1, bias_w2;  // K×K, K×1
  std::vector<BlockParams> blocks;
  Tensor head_w;  // d×1, equivariant readout
  Tensor inv_head_w1, inv_head_b1, inv_head_w2, inv_head_b2;  // d×d, [d], d×1, [1]

  /// Visits every parameter with a stable name, in a fixed order.
  void visit(const std::function<void(const std::string&, Tensor&)>& fn);
  void visit(const std::function<void(const std::string&, const Tensor&)>& fn) const;
  std::size_t count() const;
  /// Copy whose tensors are tape-tracked aliases of these parameters.
  ModelParams bind(Tape& tape) const;
  /// Deep copy.
  ModelParams clone() const;
};

/// Projections N(0, 1/fan_in), attention output projections and the
/// equivariant readout zero, norms at identity, Gaussian bases as in
/// init_gaussian_basis. A fresh model therefore predicts p0.
ModelParams init_params(const ModelConfig& cfg);

/// Replaces the zero output projections and readout with random N(0, 1/d)
/// draws so that every sub-layer contributes to the prediction.
void randomize_output_projections(ModelParams& params, std::uint64_t seed);

struct StreamPair {
  Tensor z_inv;  // [B×n×d]
  Tensor z_equ;  // [B×n×3×d]
};

/// Dropout state for one forward pass. A default-constructed context
/// disables every stochastic component.
struct ForwardContext {
  bool training = false;
  std::uint64_t seed = 0;
};

constexpr double kInvLnEps = 1e-12;
constexpr double kEquLnEps = 1e-6;
/// Equ-LN scales each covariance eigendirection by λ / (λ + τ) on top of
/// (λ + ε)^(−1/2), so directions without spread stay at zero.
constexpr double kEquLnDamping = 1e-10;

/// Standard layer norm over the last axis with affine γ, β.
Tensor inv_ln(const Tensor& z, const Tensor& gamma, const Tensor& beta, double eps = kInvLnEps);
/// U(z − μ1ᵀ) ⊙ γ per 3×d slab, U ≈ (Cov + εI)^(−1/2) (see kEquLnDamping), Cov = (z − μ1ᵀ)(z − μ1ᵀ)ᵀ / d.
Tensor equ_ln(const Tensor& z_equ, const Tensor& gamma, double eps = kEquLnEps);

Tensor inv_ffn(const Tensor& z, const Tensor& w1, const Tensor& w2, Dropout* activation_dropout = nullptr);
/// (Zᴱ W_up ⊙ GELU(Zᴵ W_gate)) W_down.
Tensor equ_ffn(const Tensor& z_equ, const Tensor& z_inv, const Tensor& w_up, const Tensor& w_gate,
               const Tensor& w_down, bool center_equ = false, bool corrupt_product_backward = false,
               Dropout* activation_dropout = nullptr);

/// Stacks equally sized systems into the batch layout. Throws ValidationError
/// on invalid systems, mixed sizes or missing velocities.
void validate_batch(const ModelConfig& cfg, std::span<const MolecularSystem> batch);

StreamPair input_layer(const ModelConfig& cfg, const ModelParams& params, std::span<const MolecularSystem> batch);
/// [B×n×n] structural bias, or an undefined tensor when disabled.
Tensor compute_structural_bias(const ModelConfig& cfg, const ModelParams& params,
                               std::span<const MolecularSystem> batch);

/// Per-block randomness; null members disable the matching dropout.
struct BlockDropout {
  Dropout* attention = nullptr;
  Dropout* activation = nullptr;
  Dropout* hidden = nullptr;
  Dropout* path = nullptr;
};

StreamPair geomformer_block(const ModelConfig& cfg, const BlockParams& block, const StreamPair& in, const Tensor& bias,
                            const BlockDropout& dropout = {});

StreamPair forward(const ModelConfig& cfg, const ModelParams& params, std::span<const MolecularSystem> batch,
                   const ForwardContext& ctx = {});

/// Mean-pool over atoms then a two-layer GELU MLP: [B×n×d] → [B].
Tensor invariant_head(const ModelParams& params, const Tensor& z_inv);
/// p0 + Zᴱ·w: [B×n×3×d] → [B×n×3].
Tensor equivariant_head(const ModelParams& params, const Tensor& z_equ, const Tensor& p0);

/// Batch positions as a [B×n×3] tensor.
Tensor stack_positions(std::span<const MolecularSystem> batch);

/// Forward pass plus equivariant head: predicted positions [B×n×3].
Tensor predict_positions(const ModelConfig& cfg, const ModelParams& params, std::span<const MolecularSystem> batch,
                         const ForwardContext& ctx = {});

struct Model {
  ModelConfig config;
  ModelParams params;
};

Model make_model(const ModelConfig& cfg);

/// Manifest line (JSON) + '\n' + little-endian float64 blob.
void save_checkpoint(const std::string& path, const Model& model);
/// Throws IoError when unreadable, FormatError naming the first manifest
/// entry that disagrees with the architecture its config implies.
Model load_checkpoint(const std::string& path);

struct ManifestEntry {
  std::string name;
  Shape shape;
  std::size_t offset;
};
/// Parses only the manifest line.
std::vector<ManifestEntry> read_manifest(const std::string& path, std::string* config_json = nullptr);

std::string config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const std::string& text);

}  // namespace geomf
