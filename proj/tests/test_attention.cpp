#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "geomf/attention.hpp"
#include "geomf/geometry.hpp"

using namespace geomf;

namespace {

Tensor uniform(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(element_count(shape));
  for (double& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v));
}

SelfAttentionParams random_self(std::size_t d, std::mt19937_64& rng) {
  return {uniform({d, d}, rng), uniform({d, d}, rng), uniform({d, d}, rng), uniform({d, d}, rng)};
}

CrossAttentionParams random_cross(std::size_t d, std::mt19937_64& rng) {
  return {uniform({d, d}, rng), uniform({d, d}, rng), uniform({d, d}, rng),
          uniform({d, d}, rng), uniform({d, d}, rng), uniform({d, d}, rng)};
}

// Applies R to every 3-vector channel of a [B×n×3×d] tensor.
Tensor rotate(const Tensor& z, const Mat3& r) {
  const std::size_t rows = z.dim(0) * z.dim(1);
  const std::size_t d = z.dim(3);
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

// Reorders atoms (axis 1) of a [1×n×...] tensor: out[i] = in[perm[i]].
Tensor permute_atoms(const Tensor& z, const std::vector<std::size_t>& perm) {
  const std::size_t n = z.dim(1);
  const std::size_t row = z.size() / (z.dim(0) * n);
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < row; ++c) out[i * row + c] = z[perm[i] * row + c];
  return Tensor(z.shape(), std::move(out));
}

Tensor permute_bias(const Tensor& b, const std::vector<std::size_t>& perm) {
  const std::size_t n = b.dim(1);
  std::vector<double> out(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = b[perm[i] * n + perm[j]];
  return Tensor(b.shape(), std::move(out));
}

double rel_dev(const Tensor& a, const Tensor& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num) / (std::sqrt(den) + 1e-12);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Independent loop-level evaluation of equivariant self-attention on one system.
std::vector<double> brute_equ_self(const Tensor& z, const SelfAttentionParams& p, const Tensor& bias,
                                   std::size_t heads) {
  const std::size_t n = z.dim(1), d = z.dim(3), dh = d / heads;
  auto proj = [&](const Tensor& w) {
    std::vector<double> out(n * 3 * d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t s = 0; s < 3; ++s)
        for (std::size_t o = 0; o < d; ++o)
          for (std::size_t c = 0; c < d; ++c) out[(i * 3 + s) * d + o] += z[(i * 3 + s) * d + c] * w[c * d + o];
    return out;
  };
  auto q = proj(p.wq), k = proj(p.wk), v = proj(p.wv);
  std::vector<double> merged(n * 3 * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> logit(n);
      for (std::size_t j = 0; j < n; ++j) {
        double a = 0.0;
        for (std::size_t c = h * dh; c < (h + 1) * dh; ++c)
          for (std::size_t s = 0; s < 3; ++s) a += q[(i * 3 + s) * d + c] * k[(j * 3 + s) * d + c];
        logit[j] = a / std::sqrt(3.0 * dh) + (bias.defined() ? bias[i * n + j] : 0.0);
      }
      double hi = logit[0];
      for (double x : logit) hi = std::max(hi, x);
      double total = 0.0;
      for (double& x : logit) total += (x = std::exp(x - hi));
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t s = 0; s < 3; ++s)
          for (std::size_t c = h * dh; c < (h + 1) * dh; ++c)
            merged[(i * 3 + s) * d + c] += logit[j] / total * v[(j * 3 + s) * d + c];
    }
  }
  std::vector<double> out(n * 3 * d, 0.0);
  for (std::size_t r = 0; r < n * 3; ++r)
    for (std::size_t o = 0; o < d; ++o)
      for (std::size_t c = 0; c < d; ++c) out[r * d + o] += merged[r * d + c] * p.wo[c * d + o];
  return out;
}

}  // namespace

TEST(Attention, DotProductPairwiseExample) {
  Tensor x({1, 3, 2}, {1, 0, 0, 2, 0, 0});
  Tensor y({1, 3, 2}, {1, 0, 1, 1, 0, 1});
  Tensor z = dot_product_pairwise(x, y);
  EXPECT_EQ(z.shape(), (Shape{1, 2}));
  EXPECT_DOUBLE_EQ(z[0], 1.0);
  EXPECT_DOUBLE_EQ(z[1], 2.0);
  EXPECT_THROW(dot_product_pairwise(x, Tensor({1, 3, 3})), DimensionError);
}

TEST(Attention, DotProductPairwiseProperties) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 20; ++t) {
    Tensor x = uniform({1, 4, 3, 5}, rng), y = uniform({1, 4, 3, 5}, rng);
    const Tensor sq = dot_product_pairwise(x, x);
    for (double v : sq.values()) EXPECT_GE(v, 0.0);
    Mat3 r = random_rotation(static_cast<std::uint64_t>(t), true).R;
    EXPECT_LT(max_abs_diff(dot_product_pairwise(rotate(x, r), rotate(y, r)), dot_product_pairwise(x, y)), 1e-10);
  }
}

TEST(Attention, ScalarProductExample) {
  Tensor x({1, 3, 2}, {1, 0, 0, 1, 0, 0});
  Tensor y({1, 2}, {2, 3});
  Tensor z = scalar_product(x, y);
  EXPECT_EQ(z.values()[0], 2.0);
  EXPECT_EQ(z.values()[3], 3.0);
  for (std::size_t i : {1u, 2u, 4u, 5u}) EXPECT_EQ(z[i], 0.0);
  EXPECT_THROW(scalar_product(x, Tensor({1, 3})), DimensionError);
}

TEST(Attention, ScalarProductProperties) {
  std::mt19937_64 rng(2);
  Tensor x = uniform({2, 3, 3, 4}, rng);
  Tensor same = scalar_product(x, Tensor::full({2, 3, 4}, 1.0));
  EXPECT_EQ(max_abs_diff(same, x), 0.0);
  Tensor y = uniform({2, 3, 4}, rng);
  Mat3 r = random_rotation(3, false).R;
  EXPECT_LT(max_abs_diff(rotate(scalar_product(x, y), r), scalar_product(rotate(x, r), y)), 1e-12);
}

TEST(Attention, ScalarProductGradientAndCorruption) {
  std::mt19937_64 rng(3);
  Tensor x0 = uniform({1, 2, 3, 3}, rng), y0 = uniform({1, 2, 3}, rng);
  Tensor w = uniform({1, 2, 3, 3}, rng);
  auto loss = [&](const Tensor& x, const Tensor& y, bool corrupt) { return sum_all(mul(scalar_product(x, y, corrupt), w)); };
  Tensor fd_y = finite_diff_gradient([&](const Tensor& y) { return loss(x0, y, false).item(); }, y0, 1e-5);
  Tensor fd_x = finite_diff_gradient([&](const Tensor& x) { return loss(x, y0, false).item(); }, x0, 1e-5);
  for (bool corrupt : {false, true}) {
    Tape tape;
    Tensor x = tape.watch(x0), y = tape.watch(y0);
    tape.backward(loss(x, y, corrupt));
    EXPECT_LT(max_abs_diff(tape.grad(x), fd_x), 1e-9);
    if (corrupt) {
      EXPECT_GT(max_abs_diff(tape.grad(y), fd_y), 1e-3);
    } else {
      EXPECT_LT(max_abs_diff(tape.grad(y), fd_y), 1e-9);
    }
  }
}

TEST(Attention, CenterChannelsHasZeroMean) {
  std::mt19937_64 rng(4);
  Tensor c = center_channels(uniform({2, 3, 3, 5}, rng, -3, 3));
  for (std::size_t r = 0; r < 2 * 3 * 3; ++r) {
    double m = 0.0;
    for (std::size_t k = 0; k < 5; ++k) m += c[r * 5 + k];
    EXPECT_NEAR(m, 0.0, 1e-12);
  }
}

TEST(Attention, SingleAtomReturnsValuePath) {
  std::mt19937_64 rng(5);
  const std::size_t d = 4;
  AttentionOptions opts;
  opts.heads = 2;
  SelfAttentionParams sp = random_self(d, rng);
  CrossAttentionParams cp = random_cross(d, rng);
  Tensor zi = uniform({1, 1, d}, rng), ze = uniform({1, 1, 3, d}, rng);
  Tensor bias = uniform({1, 1, 1}, rng);
  EXPECT_LT(max_abs_diff(inv_self_attn(zi, sp, bias, opts), linear(linear(zi, sp.wv), sp.wo)), 1e-14);
  EXPECT_LT(max_abs_diff(equ_self_attn(ze, sp, bias, opts), linear(linear(ze, sp.wv), sp.wo)), 1e-14);
  Tensor inv_value = dot_product_pairwise(linear(ze, cp.wv1), linear(ze, cp.wv2));
  EXPECT_LT(max_abs_diff(inv_cross_attn(zi, ze, cp, bias, opts), linear(inv_value, cp.wo)), 1e-14);
  Tensor equ_value = scalar_product(linear(ze, cp.wv1), linear(zi, cp.wv2));
  EXPECT_LT(max_abs_diff(equ_cross_attn(ze, zi, cp, bias, opts), linear(equ_value, cp.wo)), 1e-14);
}

TEST(Attention, MaskingBiasIsolatesAtoms) {
  std::mt19937_64 rng(6);
  const std::size_t n = 4, d = 4;
  std::vector<double> mask(n * n, -1e9);
  for (std::size_t i = 0; i < n; ++i) mask[i * n + i] = 0.0;
  Tensor bias({1, n, n}, mask);
  AttentionOptions opts;
  opts.heads = 2;
  SelfAttentionParams sp = random_self(d, rng);
  Tensor zi = uniform({1, n, d}, rng), ze = uniform({1, n, 3, d}, rng);
  EXPECT_LT(max_abs_diff(inv_self_attn(zi, sp, bias, opts), linear(linear(zi, sp.wv), sp.wo)), 1e-12);
  EXPECT_LT(max_abs_diff(equ_self_attn(ze, sp, bias, opts), linear(linear(ze, sp.wv), sp.wo)), 1e-12);
}

TEST(Attention, ZeroValueProjectionsGiveZero) {
  std::mt19937_64 rng(7);
  const std::size_t n = 3, d = 4;
  AttentionOptions opts;
  opts.heads = 2;
  SelfAttentionParams sp = random_self(d, rng);
  sp.wv = Tensor({d, d});
  CrossAttentionParams cp = random_cross(d, rng);
  cp.wv1 = Tensor({d, d});
  Tensor zi = uniform({1, n, d}, rng), ze = uniform({1, n, 3, d}, rng);
  Tensor bias = uniform({1, n, n}, rng);
  const Tensor outs[] = {inv_self_attn(zi, sp, bias, opts), equ_self_attn(ze, sp, bias, opts),
                         equ_cross_attn(ze, zi, cp, bias, opts)};
  for (const Tensor& out : outs)
    for (double v : out.values()) EXPECT_EQ(v, 0.0);
  CrossAttentionParams cp2 = random_cross(d, rng);
  const Tensor cross = inv_cross_attn(zi, Tensor({1, n, 3, d}), cp2, bias, opts);
  for (double v : cross.values()) EXPECT_EQ(v, 0.0);
}

TEST(Attention, EquSelfMatchesBruteForce) {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 30; ++t) {
    const std::size_t n = 1 + t % 5;
    const std::size_t heads = 1 + t % 2;
    const std::size_t d = heads * (1 + t % 4);
    SelfAttentionParams sp = random_self(d, rng);
    Tensor ze = uniform({1, n, 3, d}, rng), bias = uniform({1, n, n}, rng);
    AttentionOptions opts;
    opts.heads = heads;
    AttentionProbe probe;
    opts.probe = &probe;
    Tensor out = equ_self_attn(ze, sp, bias, opts);
    auto ref = brute_equ_self(ze, sp, bias, heads);
    for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(out[i], ref[i], 1e-12);
    // Raw scores against an explicit double loop Σ_k Q[i,:,k]·K[j,:,k].
    Tensor q = linear(ze, sp.wq), k = linear(ze, sp.wk);
    const std::size_t dh = d / heads;
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          double a = 0.0;
          for (std::size_t c = h * dh; c < (h + 1) * dh; ++c)
            for (std::size_t s = 0; s < 3; ++s) a += q[(i * 3 + s) * d + c] * k[(j * 3 + s) * d + c];
          ASSERT_NEAR(probe.scores.at({0, h, i, j}) * std::sqrt(3.0 * dh), a, 1e-10);
        }
  }
}

TEST(Attention, ProbabilityRowsSumToOne) {
  std::mt19937_64 rng(9);
  const std::size_t n = 5, d = 6;
  AttentionProbe probe;
  AttentionOptions opts;
  opts.heads = 3;
  opts.probe = &probe;
  Tensor zi = uniform({2, n, d}, rng, -3, 3), ze = uniform({2, n, 3, d}, rng, -3, 3);
  Tensor bias = uniform({2, n, n}, rng, -5, 5);
  SelfAttentionParams sp = random_self(d, rng);
  CrossAttentionParams cp = random_cross(d, rng);
  auto check_rows = [&] {
    for (std::size_t r = 0; r < probe.probabilities.size() / n; ++r) {
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) total += probe.probabilities[r * n + j];
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  };
  inv_self_attn(zi, sp, bias, opts);
  check_rows();
  equ_self_attn(ze, sp, bias, opts);
  check_rows();
  inv_cross_attn(zi, ze, cp, bias, opts);
  check_rows();
  equ_cross_attn(ze, zi, cp, bias, opts);
  check_rows();
}

TEST(Attention, RotationContracts) {
  std::mt19937_64 rng(10);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 2 + t % 5, d = 4;
    SelfAttentionParams sp = random_self(d, rng);
    CrossAttentionParams cp = random_cross(d, rng);
    Tensor zi = uniform({1, n, d}, rng), ze = uniform({1, n, 3, d}, rng), bias = uniform({1, n, n}, rng);
    AttentionOptions opts;
    opts.heads = 2;
    opts.center_equ_inputs = t % 2 == 1;
    const Mat3 r = random_rotation(static_cast<std::uint64_t>(t), true).R;
    const Tensor zr = rotate(ze, r);
    AttentionProbe p0, p1;
    opts.probe = &p0;
    Tensor es = equ_self_attn(ze, sp, bias, opts);
    opts.probe = &p1;
    Tensor es_r = equ_self_attn(zr, sp, bias, opts);
    opts.probe = nullptr;
    ASSERT_LT(rel_dev(es_r, rotate(es, r)), 1e-8);
    ASSERT_LT(max_abs_diff(p0.scores, p1.scores), 1e-10);
    ASSERT_LT(rel_dev(equ_cross_attn(zr, zi, cp, bias, opts), rotate(equ_cross_attn(ze, zi, cp, bias, opts), r)),
              1e-8);
    ASSERT_LT(rel_dev(inv_cross_attn(zi, zr, cp, bias, opts), inv_cross_attn(zi, ze, cp, bias, opts)), 1e-8);
  }
}

TEST(Attention, SpatialHeadSplitBreaksEquivariance) {
  std::mt19937_64 rng(11);
  const std::size_t n = 4, d = 4;
  SelfAttentionParams sp = random_self(d, rng);
  Tensor ze = uniform({1, n, 3, d}, rng);
  AttentionOptions opts;
  opts.heads = 2;
  opts.spatial_head_split = true;
  const Mat3 r = random_rotation(1, false).R;
  EXPECT_GT(rel_dev(equ_self_attn(rotate(ze, r), sp, Tensor(), opts), rotate(equ_self_attn(ze, sp, Tensor(), opts), r)),
            1e-3);
}

TEST(Attention, PermutationEquivariance) {
  std::mt19937_64 rng(12);
  for (int t = 0; t < 20; ++t) {
    const std::size_t n = 5, d = 4;
    std::vector<std::size_t> perm{0, 1, 2, 3, 4};
    std::shuffle(perm.begin(), perm.end(), rng);
    SelfAttentionParams sp = random_self(d, rng);
    CrossAttentionParams cp = random_cross(d, rng);
    Tensor zi = uniform({1, n, d}, rng), ze = uniform({1, n, 3, d}, rng), bias = uniform({1, n, n}, rng);
    Tensor zi_p = permute_atoms(zi, perm), ze_p = permute_atoms(ze, perm), bias_p = permute_bias(bias, perm);
    AttentionOptions opts;
    opts.heads = 2;
    ASSERT_LT(rel_dev(inv_self_attn(zi_p, sp, bias_p, opts), permute_atoms(inv_self_attn(zi, sp, bias, opts), perm)),
              1e-12);
    ASSERT_LT(rel_dev(equ_self_attn(ze_p, sp, bias_p, opts), permute_atoms(equ_self_attn(ze, sp, bias, opts), perm)),
              1e-12);
    ASSERT_LT(rel_dev(inv_cross_attn(zi_p, ze_p, cp, bias_p, opts),
                      permute_atoms(inv_cross_attn(zi, ze, cp, bias, opts), perm)),
              1e-12);
    ASSERT_LT(rel_dev(equ_cross_attn(ze_p, zi_p, cp, bias_p, opts),
                      permute_atoms(equ_cross_attn(ze, zi, cp, bias, opts), perm)),
              1e-12);
  }
}

TEST(Attention, EquCrossWithUnitGateIsEquSelf) {
  std::mt19937_64 rng(13);
  const std::size_t n = 4, d = 6;
  Tensor eye({d, d});
  for (std::size_t i = 0; i < d; ++i) eye.mutable_values()[i * d + i] = 1.0;
  SelfAttentionParams sp = random_self(d, rng);
  CrossAttentionParams cp{sp.wq, sp.wk, eye, sp.wv, eye, sp.wo};
  Tensor ze = uniform({1, n, 3, d}, rng), bias = uniform({1, n, n}, rng);
  AttentionOptions opts;
  opts.heads = 3;
  Tensor ones = Tensor::full({1, n, d}, 1.0);
  EXPECT_LT(max_abs_diff(equ_cross_attn(ze, ones, cp, bias, opts), equ_self_attn(ze, sp, bias, opts)), 1e-14);
}

TEST(Attention, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(14);
  const std::size_t n = 3, d = 4;
  Tensor zi0 = uniform({2, n, d}, rng), ze0 = uniform({2, n, 3, d}, rng), bias0 = uniform({2, n, n}, rng);
  SelfAttentionParams sp0 = random_self(d, rng);
  CrossAttentionParams cp0 = random_cross(d, rng);
  Tensor wi = uniform({2, n, d}, rng), we = uniform({2, n, 3, d}, rng);
  // Inputs: zi, ze, bias, 4 self weights, 6 cross weights.
  std::vector<Tensor> inputs{zi0, ze0, bias0, sp0.wq, sp0.wk, sp0.wv, sp0.wo,
                             cp0.wq, cp0.wk1, cp0.wk2, cp0.wv1, cp0.wv2, cp0.wo};
  auto f = [&](const std::vector<Tensor>& x) {
    AttentionOptions opts;
    opts.heads = 2;
    opts.center_equ_inputs = true;
    SelfAttentionParams sp{x[3], x[4], x[5], x[6]};
    CrossAttentionParams cp{x[7], x[8], x[9], x[10], x[11], x[12]};
    Tensor total = add(sum_all(mul(inv_self_attn(x[0], sp, x[2], opts), wi)),
                       sum_all(mul(equ_self_attn(x[1], sp, x[2], opts), we)));
    total = add(total, sum_all(mul(inv_cross_attn(x[0], x[1], cp, x[2], opts), wi)));
    return add(total, sum_all(mul(equ_cross_attn(x[1], x[0], cp, x[2], opts), we)));
  };
  Tape tape;
  std::vector<Tensor> watched;
  for (const Tensor& t : inputs) watched.push_back(tape.watch(t));
  tape.backward(f(watched));
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor fd = finite_diff_gradient(
        [&](const Tensor& probe) {
          auto args = inputs;
          args[k] = probe;
          return f(args).item();
        },
        inputs[k], 1e-5);
    Tensor g = tape.grad(watched[k]);
    double scale = 1e-6;
    for (double v : fd.values()) scale = std::max(scale, std::abs(v));
    EXPECT_LT(max_abs_diff(g, fd) / scale, 1e-6) << "input " << k;
  }
}

TEST(Attention, DropoutScalesKeptEntries) {
  Dropout drop(0.5, 1);
  Tensor x = Tensor::full({1000}, 1.0);
  Tensor y = drop.apply(x);
  std::size_t kept = 0;
  for (double v : y.values()) {
    EXPECT_TRUE(v == 0.0 || v == 2.0);
    kept += v != 0.0;
  }
  EXPECT_GT(kept, 400u);
  EXPECT_LT(kept, 600u);
  Dropout off;
  EXPECT_EQ(off.apply(x).values()[0], 1.0);
}
