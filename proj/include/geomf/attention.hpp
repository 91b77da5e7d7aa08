#pragma once

// The four attention kernels bridging the invariant stream Zᴵ [B×n×d] and the
// equivariant stream Zᴱ [B×n×3×d]. A leading batch axis B holds independent
// systems of equal size; the structural bias is [B×n×n] and shared by heads.

#include <cstdint>
#include <random>
#include <vector>

#include "geomf/tensor.hpp"

namespace geomf {

/// Inverted dropout with masks drawn from an owned generator. Inactive
/// instances (p = 0 or evaluation) return their input unchanged.
class Dropout {
 public:
  Dropout() = default;
  Dropout(double p, std::uint64_t seed) : p_(p), rng_(seed) {}

  bool active() const { return p_ > 0.0; }
  double rate() const { return p_; }
  /// x ⊙ mask / (1 − p) with one Bernoulli draw per entry of `mask_shape`,
  /// which must broadcast to x by the trailing-axis rule.
  Tensor apply(const Tensor& x, const Shape& mask_shape);
  Tensor apply(const Tensor& x) { return apply(x, x.shape()); }
  /// One keep/drop decision, for stochastic depth.
  bool keep();

 private:
  double p_ = 0.0;
  std::mt19937_64 rng_;
};

struct SelfAttentionParams {
  Tensor wq, wk, wv, wo;  // d×d each
};

struct CrossAttentionParams {
  Tensor wq, wk1, wk2, wv1, wv2, wo;  // d×d each
};

/// Captured per-call internals for tests and audits.
struct AttentionProbe {
  Tensor scores;         // [B×H×n×n] scaled logits before the bias
  Tensor probabilities;  // [B×H×n×n] softmax output before dropout
};

struct AttentionOptions {
  std::size_t heads = 1;
  /// Subtract the per-atom channel mean of Zᴱ before equivariant projections.
  bool center_equ_inputs = false;
  /// Test mutation: split heads of Zᴱ by a flat reshape that mixes the
  /// spatial axis into the head axis.
  bool spatial_head_split = false;
  /// Test mutation: wrong gradient for the invariant operand of ⊙.
  bool corrupt_product_backward = false;
  Dropout* dropout = nullptr;
  AttentionProbe* probe = nullptr;
};

/// ⟨X, Y⟩: per-channel inner product over the spatial axis, [..., 3, c] → [..., c].
Tensor dot_product_pairwise(const Tensor& x, const Tensor& y);
/// X ⊙ Y: scales every 3-vector channel X[..., :, k] by Y[..., k].
Tensor scalar_product(const Tensor& x, const Tensor& y, bool corrupt_backward = false);

/// Z − μ1ᵀ with μ the channel mean of each 3×d slab.
Tensor center_channels(const Tensor& z_equ);

/// An undefined `bias` disables the structural bias.
Tensor inv_self_attn(const Tensor& z_inv, const SelfAttentionParams& p, const Tensor& bias,
                     const AttentionOptions& opts);
Tensor equ_self_attn(const Tensor& z_equ, const SelfAttentionParams& p, const Tensor& bias,
                     const AttentionOptions& opts);
Tensor inv_cross_attn(const Tensor& z_inv, const Tensor& z_equ, const CrossAttentionParams& p, const Tensor& bias,
                      const AttentionOptions& opts);
Tensor equ_cross_attn(const Tensor& z_equ, const Tensor& z_inv, const CrossAttentionParams& p, const Tensor& bias,
                      const AttentionOptions& opts);

}  // namespace geomf
