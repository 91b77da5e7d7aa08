#include <algorithm>
#include <cmath>
#include <memory>

#include "geomf/model.hpp"

namespace geomf {

Tensor inv_ln(const Tensor& z, const Tensor& gamma, const Tensor& beta, double eps) {
  if (z.rank() == 0) throw DimensionError("inv_ln: needs at least one axis");
  const std::size_t d = z.shape().back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw DimensionError("inv_ln: affine parameters must be [" + std::to_string(d) + "]");
  }
  const std::size_t rows = z.size() / d;
  auto zv = z.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  auto normalized = std::make_shared<std::vector<double>>(z.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(z.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = zv.data() + r * d;
    double m = 0.0;
    for (std::size_t k = 0; k < d; ++k) m += x[k];
    m /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t k = 0; k < d; ++k) var += (x[k] - m) * (x[k] - m);
    var /= static_cast<double>(d);
    const double s = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = s;
    for (std::size_t k = 0; k < d; ++k) {
      const double xh = (x[k] - m) * s;
      (*normalized)[r * d + k] = xh;
      out[r * d + k] = xh * gv[k] + bv[k];
    }
  }
  return record_op(Tensor(z.shape(), std::move(out)), {&z, &gamma, &beta}, [&] {
    return [normalized, inv_std, gamma = gamma.detach(), rows, d](std::span<const double> g, GradientSink& in) {
      auto gz = in[0];
      auto gg = in[1];
      auto gb = in[2];
      auto gv = gamma.values();
      std::vector<double> gxh(d);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* xh = normalized->data() + r * d;
        const double* go = g.data() + r * d;
        double mean_g = 0.0, mean_gx = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
          gxh[k] = go[k] * gv[k];
          mean_g += gxh[k];
          mean_gx += gxh[k] * xh[k];
          if (!gg.empty()) gg[k] += go[k] * xh[k];
          if (!gb.empty()) gb[k] += go[k];
        }
        if (gz.empty()) continue;
        mean_g /= static_cast<double>(d);
        mean_gx /= static_cast<double>(d);
        const double s = (*inv_std)[r];
        for (std::size_t k = 0; k < d; ++k) gz[r * d + k] += s * (gxh[k] - mean_g - xh[k] * mean_gx);
      }
    };
  });
}

namespace {

// Saved per-slab state of Equ-LN: centred input X (3×d), U and its eigenbasis.
struct EquLnSlab {
  Mat3 u;
  Mat3 v;
  Vec3 lambda;
};

// f(λ) = h(λ) (λ + ε)^(−1/2) with h(λ) = λ / (λ + τ). The damping h keeps
// directions without spread (planar or collinear slabs, eigenvalues at
// roundoff level) from being scaled up by 1/√ε.
double whitening_factor(double lambda, double eps) {
  const double l = std::max(lambda, 0.0);
  return l / (l + kEquLnDamping) / std::sqrt(l + eps);
}

// (f(a) − f(b)) / (a − b), or f′(a) when a = b, in cancellation-free form:
// f[a,b] = g[a,b] h(a) + g(b) h[a,b] with g(λ) = (λ + ε)^(−1/2).
double whitening_divided_difference(double la, double lb, double eps) {
  const double a = std::max(la, 0.0), b = std::max(lb, 0.0);
  const double ra = std::sqrt(a + eps), rb = std::sqrt(b + eps);
  const double g_ab = -1.0 / (ra * rb * (ra + rb));
  const double h_a = a / (a + kEquLnDamping);
  const double h_ab = kEquLnDamping / ((a + kEquLnDamping) * (b + kEquLnDamping));
  return g_ab * h_a + h_ab / rb;
}

}  // namespace

Tensor equ_ln(const Tensor& z_equ, const Tensor& gamma, double eps) {
  const std::size_t r = z_equ.rank();
  if (r < 2 || z_equ.shape()[r - 2] != 3) {
    throw DimensionError("equ_ln: expected [..., 3, d], got " + to_string(z_equ.shape()));
  }
  const std::size_t d = z_equ.shape().back();
  if (gamma.shape() != Shape{d}) throw DimensionError("equ_ln: γ must be [" + std::to_string(d) + "]");
  const std::size_t slabs = z_equ.size() / (3 * d);
  auto zv = z_equ.values();
  auto gv = gamma.values();
  auto centred = std::make_shared<std::vector<double>>(z_equ.size());
  auto whitened = std::make_shared<std::vector<double>>(z_equ.size());
  auto state = std::make_shared<std::vector<EquLnSlab>>(slabs);
  std::vector<double> out(z_equ.size());
  const double inv_d = 1.0 / static_cast<double>(d);
  for (std::size_t b = 0; b < slabs; ++b) {
    const double* z = zv.data() + b * 3 * d;
    double* x = centred->data() + b * 3 * d;
    for (std::size_t s = 0; s < 3; ++s) {
      double m = 0.0;
      for (std::size_t k = 0; k < d; ++k) m += z[s * d + k];
      m *= inv_d;
      for (std::size_t k = 0; k < d; ++k) x[s * d + k] = z[s * d + k] - m;
    }
    Mat3 cov{};
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = i; j < 3; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < d; ++k) acc += x[i * d + k] * x[j * d + k];
        cov[i][j] = cov[j][i] = acc * inv_d;
      }
    }
    const SymmetricEigen e = symmetric_eigen(cov);
    EquLnSlab& st = (*state)[b];
    st.v = e.vectors;
    st.lambda = e.values;
    Vec3 f;
    for (int k = 0; k < 3; ++k) f[k] = whitening_factor(e.values[k], eps);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double acc = 0.0;
        for (int k = 0; k < 3; ++k) acc += e.vectors[i][k] * f[k] * e.vectors[j][k];
        st.u[i][j] = acc;
      }
    double* y = whitened->data() + b * 3 * d;
    double* o = out.data() + b * 3 * d;
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t k = 0; k < d; ++k) {
        const double val = st.u[i][0] * x[k] + st.u[i][1] * x[d + k] + st.u[i][2] * x[2 * d + k];
        y[i * d + k] = val;
        o[i * d + k] = val * gv[k];
      }
    }
  }
  return record_op(Tensor(z_equ.shape(), std::move(out)), {&z_equ, &gamma}, [&] {
    return [centred, whitened, state, gamma = gamma.detach(), slabs, d, eps](std::span<const double> g,
                                                                              GradientSink& in) {
      auto gz = in[0];
      auto gg = in[1];
      auto gv = gamma.values();
      const double inv_d = 1.0 / static_cast<double>(d);
      std::vector<double> gy(3 * d), gx(3 * d);
      for (std::size_t b = 0; b < slabs; ++b) {
        const double* go = g.data() + b * 3 * d;
        const double* x = centred->data() + b * 3 * d;
        const double* y = whitened->data() + b * 3 * d;
        for (std::size_t i = 0; i < 3 * d; ++i) {
          const std::size_t k = i % d;
          gy[i] = go[i] * gv[k];
          if (!gg.empty()) gg[k] += go[i] * y[i];
        }
        if (gz.empty()) continue;
        const EquLnSlab& st = (*state)[b];
        // Y = U X: ∂U = Gy Xᵀ, ∂X = U Gy (U symmetric).
        Mat3 gu{};
        for (std::size_t i = 0; i < 3; ++i)
          for (std::size_t j = 0; j < 3; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < d; ++k) acc += gy[i * d + k] * x[j * d + k];
            gu[i][j] = acc;
          }
        for (std::size_t i = 0; i < 3; ++i)
          for (std::size_t k = 0; k < d; ++k)
            gx[i * d + k] = st.u[i][0] * gy[k] + st.u[i][1] * gy[d + k] + st.u[i][2] * gy[2 * d + k];
        // U = f(C): ∂C = V((Vᵀ ∂U V) ∘ F)Vᵀ with F the divided differences of f.
        const Mat3& v = st.v;
        const Mat3 m = mat3_mul(mat3_transpose(v), mat3_mul(gu, v));
        Mat3 scaled{};
        for (int i = 0; i < 3; ++i)
          for (int j = 0; j < 3; ++j) scaled[i][j] = m[i][j] * whitening_divided_difference(st.lambda[i], st.lambda[j], eps);
        const Mat3 gc = mat3_mul(v, mat3_mul(scaled, mat3_transpose(v)));
        // C = X Xᵀ / d: ∂X += (∂C + ∂Cᵀ) X / d.
        for (std::size_t i = 0; i < 3; ++i)
          for (std::size_t k = 0; k < d; ++k) {
            double acc = 0.0;
            for (std::size_t j = 0; j < 3; ++j) acc += (gc[i][j] + gc[j][i]) * x[j * d + k];
            gx[i * d + k] += acc * inv_d;
          }
        double* gzb = gz.data() + b * 3 * d;
        for (std::size_t i = 0; i < 3; ++i) {
          double m_row = 0.0;
          for (std::size_t k = 0; k < d; ++k) m_row += gx[i * d + k];
          m_row *= inv_d;
          for (std::size_t k = 0; k < d; ++k) gzb[i * d + k] += gx[i * d + k] - m_row;
        }
      }
    };
  });
}

Tensor inv_ffn(const Tensor& z, const Tensor& w1, const Tensor& w2, Dropout* activation_dropout) {
  Tensor h = gelu(linear(z, w1));
  if (activation_dropout) h = activation_dropout->apply(h);
  return linear(h, w2);
}

Tensor equ_ffn(const Tensor& z_equ, const Tensor& z_inv, const Tensor& w_up, const Tensor& w_gate,
               const Tensor& w_down, bool center_equ, bool corrupt_product_backward, Dropout* activation_dropout) {
  const Tensor up = linear(center_equ ? center_channels(z_equ) : z_equ, w_up);
  Tensor gate = gelu(linear(z_inv, w_gate));
  Tensor h = scalar_product(up, gate, corrupt_product_backward);
  if (activation_dropout) {
    Shape mask = h.shape();
    mask[mask.size() - 2] = 1;
    h = activation_dropout->apply(h, mask);
  }
  return linear(h, w_down);
}

}  // namespace geomf
