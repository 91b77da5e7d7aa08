#include "geomf/attention.hpp"

#include <cmath>

namespace geomf {

Tensor Dropout::apply(const Tensor& x, const Shape& mask_shape) {
  if (!active()) return x;
  std::bernoulli_distribution keep_draw(1.0 - p_);
  const double kept = 1.0 / (1.0 - p_);
  std::vector<double> mask(element_count(mask_shape));
  for (double& m : mask) m = keep_draw(rng_) ? kept : 0.0;
  return mul(x, Tensor(mask_shape, std::move(mask)));
}

bool Dropout::keep() {
  if (!active()) return true;
  return std::bernoulli_distribution(1.0 - p_)(rng_);
}

Tensor dot_product_pairwise(const Tensor& x, const Tensor& y) {
  if (x.shape() != y.shape() || x.rank() < 2 || x.shape()[x.rank() - 2] != 3) {
    throw DimensionError("dot_product_pairwise: expected equal [..., 3, c] shapes, got " + to_string(x.shape()) +
                         " and " + to_string(y.shape()));
  }
  return sum(mul(x, y), x.rank() - 2);
}

Tensor scalar_product(const Tensor& x, const Tensor& y, bool corrupt_backward) {
  const std::size_t r = x.rank();
  if (r < 2 || x.shape()[r - 2] != 3 || y.rank() != r - 1 ||
      !std::equal(y.shape().begin(), y.shape().end() - 1, x.shape().begin()) || y.shape().back() != x.shape().back()) {
    throw DimensionError("scalar_product: cannot scale " + to_string(x.shape()) + " by " + to_string(y.shape()));
  }
  const std::size_t c = x.shape().back();
  const std::size_t rows = y.size() / c;
  auto xv = x.values();
  auto yv = y.values();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t s = 0; s < 3; ++s)
      for (std::size_t k = 0; k < c; ++k) out[(i * 3 + s) * c + k] = xv[(i * 3 + s) * c + k] * yv[i * c + k];
  return record_op(Tensor(x.shape(), std::move(out)), {&x, &y}, [&] {
    return [x = x.detach(), y = y.detach(), rows, c, corrupt_backward](std::span<const double> g, GradientSink& in) {
      auto gx = in[0];
      auto gy = in[1];
      auto xv = x.values();
      auto yv = y.values();
      // The corrupted rule only sees the first spatial component.
      const std::size_t spatial = corrupt_backward ? 1 : 3;
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t s = 0; s < 3; ++s) {
          for (std::size_t k = 0; k < c; ++k) {
            const std::size_t idx = (i * 3 + s) * c + k;
            if (!gx.empty()) gx[idx] += g[idx] * yv[i * c + k];
            if (!gy.empty() && s < spatial) gy[i * c + k] += g[idx] * xv[idx];
          }
        }
      }
    };
  });
}

Tensor center_channels(const Tensor& z_equ) {
  Shape mean_shape = z_equ.shape();
  mean_shape.back() = 1;
  return sub(z_equ, reshape(mean(z_equ, z_equ.rank() - 1), mean_shape));
}

namespace {

struct Dims {
  std::size_t batch, n, d, heads, head_dim;
};

Dims inv_dims(const Tensor& z, std::size_t heads, const char* op) {
  if (z.rank() != 3) throw DimensionError(std::string(op) + ": invariant stream must be [B×n×d], got " + to_string(z.shape()));
  const std::size_t d = z.dim(2);
  if (heads == 0 || d % heads != 0) {
    throw DimensionError(std::string(op) + ": width " + std::to_string(d) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
  return {z.dim(0), z.dim(1), d, heads, d / heads};
}

Dims equ_dims(const Tensor& z, std::size_t heads, const char* op) {
  if (z.rank() != 4 || z.dim(2) != 3) {
    throw DimensionError(std::string(op) + ": equivariant stream must be [B×n×3×d], got " + to_string(z.shape()));
  }
  const std::size_t d = z.dim(3);
  if (heads == 0 || d % heads != 0) {
    throw DimensionError(std::string(op) + ": width " + std::to_string(d) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
  return {z.dim(0), z.dim(1), d, heads, d / heads};
}

void check_pair(const Dims& a, const Dims& b, const char* op) {
  if (a.batch != b.batch || a.n != b.n || a.d != b.d) throw DimensionError(std::string(op) + ": streams disagree in shape");
}

// [B×n×d] → [BH×n×dH]
Tensor split_inv(const Tensor& x, const Dims& s) {
  return reshape(permute(reshape(x, {s.batch, s.n, s.heads, s.head_dim}), {0, 2, 1, 3}),
                 {s.batch * s.heads, s.n, s.head_dim});
}

Tensor merge_inv(const Tensor& y, const Dims& s) {
  return reshape(permute(reshape(y, {s.batch, s.heads, s.n, s.head_dim}), {0, 2, 1, 3}), {s.batch, s.n, s.d});
}

// [B×n×3×d] → [BH×n×3dH]; each head keeps whole 3-vectors of its channels.
Tensor split_equ(const Tensor& x, const Dims& s, bool spatial_split) {
  if (spatial_split) {
    return reshape(permute(reshape(x, {s.batch, s.n, s.heads, 3 * s.head_dim}), {0, 2, 1, 3}),
                   {s.batch * s.heads, s.n, 3 * s.head_dim});
  }
  return reshape(permute(reshape(x, {s.batch, s.n, 3, s.heads, s.head_dim}), {0, 3, 1, 2, 4}),
                 {s.batch * s.heads, s.n, 3 * s.head_dim});
}

Tensor merge_equ(const Tensor& y, const Dims& s, bool spatial_split) {
  if (spatial_split) {
    return reshape(permute(reshape(y, {s.batch, s.heads, s.n, 3 * s.head_dim}), {0, 2, 1, 3}), {s.batch, s.n, 3, s.d});
  }
  return reshape(permute(reshape(y, {s.batch, s.heads, s.n, 3, s.head_dim}), {0, 2, 3, 1, 4}), {s.batch, s.n, 3, s.d});
}

// softmax(q kᵀ·scale + B) v over head-split operands.
Tensor attend(const Tensor& q, const Tensor& k, const Tensor& v, double score_scale, const Tensor& bias, const Dims& s,
              const AttentionOptions& opts) {
  Tensor scores = reshape(scale(matmul(q, transpose(k)), score_scale), {s.batch, s.heads, s.n, s.n});
  Tensor logits = scores;
  if (bias.defined()) {
    if (bias.shape() != Shape{s.batch, s.n, s.n}) {
      throw DimensionError("attention bias must be " + to_string({s.batch, s.n, s.n}) + ", got " +
                           to_string(bias.shape()));
    }
    logits = add(scores, reshape(bias, {s.batch, 1, s.n, s.n}));
  }
  Tensor probs = softmax(logits, 3);
  if (opts.probe) *opts.probe = {scores.detach(), probs.detach()};
  if (opts.dropout) probs = opts.dropout->apply(probs);
  return matmul(reshape(probs, {s.batch * s.heads, s.n, s.n}), v);
}

Tensor maybe_center(const Tensor& z, const AttentionOptions& opts) {
  return opts.center_equ_inputs ? center_channels(z) : z;
}

}  // namespace

Tensor inv_self_attn(const Tensor& z_inv, const SelfAttentionParams& p, const Tensor& bias,
                     const AttentionOptions& opts) {
  const Dims s = inv_dims(z_inv, opts.heads, "inv_self_attn");
  Tensor q = split_inv(linear(z_inv, p.wq), s);
  Tensor k = split_inv(linear(z_inv, p.wk), s);
  Tensor v = split_inv(linear(z_inv, p.wv), s);
  Tensor out = attend(q, k, v, 1.0 / std::sqrt(static_cast<double>(s.head_dim)), bias, s, opts);
  return linear(merge_inv(out, s), p.wo);
}

Tensor equ_self_attn(const Tensor& z_equ, const SelfAttentionParams& p, const Tensor& bias,
                     const AttentionOptions& opts) {
  const Dims s = equ_dims(z_equ, opts.heads, "equ_self_attn");
  const Tensor z = maybe_center(z_equ, opts);
  Tensor q = split_equ(linear(z, p.wq), s, opts.spatial_head_split);
  Tensor k = split_equ(linear(z, p.wk), s, opts.spatial_head_split);
  Tensor v = split_equ(linear(z, p.wv), s, opts.spatial_head_split);
  Tensor out = attend(q, k, v, 1.0 / std::sqrt(3.0 * static_cast<double>(s.head_dim)), bias, s, opts);
  return linear(merge_equ(out, s, opts.spatial_head_split), p.wo);
}

Tensor inv_cross_attn(const Tensor& z_inv, const Tensor& z_equ, const CrossAttentionParams& p, const Tensor& bias,
                      const AttentionOptions& opts) {
  const Dims s = inv_dims(z_inv, opts.heads, "inv_cross_attn");
  check_pair(s, equ_dims(z_equ, opts.heads, "inv_cross_attn"), "inv_cross_attn");
  const Tensor z = maybe_center(z_equ, opts);
  Tensor q = split_inv(linear(z_inv, p.wq), s);
  Tensor k = split_inv(dot_product_pairwise(linear(z, p.wk1), linear(z, p.wk2)), s);
  Tensor v = split_inv(dot_product_pairwise(linear(z, p.wv1), linear(z, p.wv2)), s);
  Tensor out = attend(q, k, v, 1.0 / std::sqrt(static_cast<double>(s.head_dim)), bias, s, opts);
  return linear(merge_inv(out, s), p.wo);
}

Tensor equ_cross_attn(const Tensor& z_equ, const Tensor& z_inv, const CrossAttentionParams& p, const Tensor& bias,
                      const AttentionOptions& opts) {
  const Dims s = equ_dims(z_equ, opts.heads, "equ_cross_attn");
  check_pair(s, inv_dims(z_inv, opts.heads, "equ_cross_attn"), "equ_cross_attn");
  const Tensor z = maybe_center(z_equ, opts);
  const bool split = opts.spatial_head_split;
  Tensor q = split_equ(linear(z, p.wq), s, split);
  Tensor k = split_equ(scalar_product(linear(z, p.wk1), linear(z_inv, p.wk2), opts.corrupt_product_backward), s, split);
  Tensor v = split_equ(scalar_product(linear(z, p.wv1), linear(z_inv, p.wv2), opts.corrupt_product_backward), s, split);
  Tensor out = attend(q, k, v, 1.0 / std::sqrt(3.0 * static_cast<double>(s.head_dim)), bias, s, opts);
  return linear(merge_equ(out, s, split), p.wo);
}

}  // namespace geomf
