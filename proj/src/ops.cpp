#include <algorithm>
#include <cmath>
#include <numbers>

#include "geomf/tensor.hpp"

namespace geomf {
namespace {

// Maps each flat index of `a` to the flat index of the broadcast operand `b`.
class Broadcast {
 public:
  Broadcast(const Shape& a, const Shape& b, const char* op) : a_(a) {
    if (b.size() > a.size()) throw incompatible(a, b, op);
    const std::size_t offset = a.size() - b.size();
    strides_.assign(a.size(), 0);
    std::size_t stride = 1;
    bool trailing = true;
    for (std::size_t k = b.size(); k-- > 0;) {
      const std::size_t axis = k + offset;
      if (b[k] == a[axis]) {
        strides_[axis] = b[k] == 1 ? 0 : stride;
      } else if (b[k] == 1) {
        strides_[axis] = 0;
        trailing = false;
      } else {
        throw incompatible(a, b, op);
      }
      stride *= b[k];
    }
    b_size_ = stride;
    same_ = a == b;
    // b equals the trailing block of a, so the index is a plain modulus.
    trailing_ = trailing && !same_;
  }

  template <typename Fn>
  void for_each(Fn&& fn) const {
    const std::size_t n = element_count(a_);
    if (same_) {
      for (std::size_t i = 0; i < n; ++i) fn(i, i);
      return;
    }
    if (b_size_ == 1) {
      for (std::size_t i = 0; i < n; ++i) fn(i, std::size_t{0});
      return;
    }
    if (trailing_) {
      for (std::size_t i = 0; i < n; ++i) fn(i, i % b_size_);
      return;
    }
    std::vector<std::size_t> index(a_.size(), 0);
    std::size_t ib = 0;
    for (std::size_t ia = 0; ia < n; ++ia) {
      fn(ia, ib);
      for (std::size_t axis = a_.size(); axis-- > 0;) {
        ++index[axis];
        ib += strides_[axis];
        if (index[axis] < a_[axis]) break;
        ib -= strides_[axis] * a_[axis];
        index[axis] = 0;
      }
    }
  }

 private:
  static DimensionError incompatible(const Shape& a, const Shape& b, const char* op) {
    return DimensionError(std::string(op) + ": cannot broadcast " + to_string(b) + " to " + to_string(a));
  }

  Shape a_;
  std::vector<std::size_t> strides_;
  std::size_t b_size_ = 1;
  bool same_ = false;
  bool trailing_ = false;
};

const char* kind_name(BinaryKind kind) {
  switch (kind) {
    case BinaryKind::kAdd: return "add";
    case BinaryKind::kSub: return "sub";
    case BinaryKind::kMul: return "mul";
    case BinaryKind::kDiv: return "div";
  }
  return "?";
}

// Splits a shape around `axis` into (outer, extent, inner) for axis-wise kernels.
struct AxisView {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisView axis_view(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw IndexError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for shape " +
                     to_string(shape));
  }
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  v.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ShapeError(std::string(op) + ": undefined tensor operand");
}

}  // namespace

Tensor elementwise(BinaryKind kind, const Tensor& a, const Tensor& b) {
  const char* name = kind_name(kind);
  require_defined(a, name);
  require_defined(b, name);
  const Broadcast bc(a.shape(), b.shape(), name);
  auto av = a.values();
  auto bv = b.values();
  if (kind == BinaryKind::kDiv) {
    for (double x : bv) {
      if (x == 0.0) throw NumericError("div: division by exact zero");
    }
  }
  std::vector<double> out(av.size());
  switch (kind) {
    case BinaryKind::kAdd: bc.for_each([&](std::size_t i, std::size_t j) { out[i] = av[i] + bv[j]; }); break;
    case BinaryKind::kSub: bc.for_each([&](std::size_t i, std::size_t j) { out[i] = av[i] - bv[j]; }); break;
    case BinaryKind::kMul: bc.for_each([&](std::size_t i, std::size_t j) { out[i] = av[i] * bv[j]; }); break;
    case BinaryKind::kDiv: bc.for_each([&](std::size_t i, std::size_t j) { out[i] = av[i] / bv[j]; }); break;
  }
  return record_op(Tensor(a.shape(), std::move(out)), {&a, &b}, [&] {
    return [kind, bc, a = a.detach(), b = b.detach()](std::span<const double> g, GradientSink& in) {
      auto ga = in[0];
      auto gb = in[1];
      auto av = a.values();
      auto bv = b.values();
      switch (kind) {
        case BinaryKind::kAdd:
        case BinaryKind::kSub: {
          const double sign = kind == BinaryKind::kAdd ? 1.0 : -1.0;
          if (!ga.empty()) {
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
          }
          if (!gb.empty()) bc.for_each([&](std::size_t i, std::size_t j) { gb[j] += sign * g[i]; });
          break;
        }
        case BinaryKind::kMul:
          if (!ga.empty()) bc.for_each([&](std::size_t i, std::size_t j) { ga[i] += g[i] * bv[j]; });
          if (!gb.empty()) bc.for_each([&](std::size_t i, std::size_t j) { gb[j] += g[i] * av[i]; });
          break;
        case BinaryKind::kDiv:
          if (!ga.empty()) bc.for_each([&](std::size_t i, std::size_t j) { ga[i] += g[i] / bv[j]; });
          if (!gb.empty()) {
            bc.for_each([&](std::size_t i, std::size_t j) { gb[j] -= g[i] * av[i] / (bv[j] * bv[j]); });
          }
          break;
      }
    };
  });
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(BinaryKind::kAdd, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(BinaryKind::kSub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(BinaryKind::kMul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return elementwise(BinaryKind::kDiv, a, b); }

Tensor scale(const Tensor& a, double factor) {
  require_defined(a, "scale");
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& x : out) x *= factor;
  return record_op(Tensor(a.shape(), std::move(out)), {&a}, [&] {
    return [factor](std::span<const double> g, GradientSink& in) {
      auto ga = in[0];
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
    };
  });
}

Tensor add_scalar(const Tensor& a, double offset) {
  require_defined(a, "add_scalar");
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& x : out) x += offset;
  return record_op(Tensor(a.shape(), std::move(out)), {&a}, [&] {
    return [](std::span<const double> g, GradientSink& in) {
      auto ga = in[0];
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    };
  });
}

Tensor sqrt(const Tensor& a) {
  require_defined(a, "sqrt");
  std::vector<double> out(a.size());
  auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (av[i] < 0.0) throw NumericError("sqrt: negative input");
    out[i] = std::sqrt(av[i]);
  }
  Tensor result(a.shape(), std::move(out));
  return record_op(result, {&a}, [&] {
    return [y = result.detach()](std::span<const double> g, GradientSink& in) {
      auto ga = in[0];
      auto yv = y.values();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += 0.5 * g[i] / yv[i];
    };
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  const auto& as = a.shape();
  const auto& bs = b.shape();
  const bool batched = as.size() == 3 && bs.size() == 3;
  if (!(batched || (as.size() == 2 && bs.size() == 2)) || as[as.size() - 1] != bs[bs.size() - 2] ||
      (batched && as[0] != bs[0])) {
    throw DimensionError("matmul: incompatible shapes " + to_string(as) + " and " + to_string(bs));
  }
  const std::size_t batch = batched ? as[0] : 1;
  const std::size_t m = as[as.size() - 2];
  const std::size_t k = as[as.size() - 1];
  const std::size_t n = bs[bs.size() - 1];
  std::vector<double> out(batch * m * n, 0.0);
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t s = 0; s < batch; ++s) {
    const double* A = av.data() + s * m * k;
    const double* B = bv.data() + s * k * n;
    double* C = out.data() + s * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      double* row = C + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double x = A[i * k + p];
        const double* brow = B + p * n;
        for (std::size_t j = 0; j < n; ++j) row[j] += x * brow[j];
      }
    }
  }
  Shape shape = batched ? Shape{batch, m, n} : Shape{m, n};
  return record_op(Tensor(std::move(shape), std::move(out)), {&a, &b}, [&] {
    return [a = a.detach(), b = b.detach(), batch, m, k, n](std::span<const double> g, GradientSink& in) {
      auto ga = in[0];
      auto gb = in[1];
      auto av = a.values();
      auto bv = b.values();
      for (std::size_t s = 0; s < batch; ++s) {
        const double* A = av.data() + s * m * k;
        const double* B = bv.data() + s * k * n;
        const double* G = g.data() + s * m * n;
        if (!ga.empty()) {
          double* GA = ga.data() + s * m * k;
          for (std::size_t i = 0; i < m; ++i) {
            const double* grow = G + i * n;
            for (std::size_t p = 0; p < k; ++p) {
              const double* brow = B + p * n;
              double acc = 0.0;
              for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
              GA[i * k + p] += acc;
            }
          }
        }
        if (!gb.empty()) {
          double* GB = gb.data() + s * k * n;
          for (std::size_t i = 0; i < m; ++i) {
            const double* grow = G + i * n;
            for (std::size_t p = 0; p < k; ++p) {
              const double x = A[i * k + p];
              double* gbrow = GB + p * n;
              for (std::size_t j = 0; j < n; ++j) gbrow[j] += x * grow[j];
            }
          }
        }
      }
    };
  });
}

Tensor linear(const Tensor& x, const Tensor& w) {
  require_defined(x, "linear");
  require_defined(w, "linear");
  if (w.rank() != 2 || x.rank() == 0 || x.shape().back() != w.dim(0)) {
    throw DimensionError("linear: cannot apply " + to_string(w.shape()) + " to " + to_string(x.shape()));
  }
  const std::size_t k = x.shape().back();
  const std::size_t rows = x.size() / k;
  Tensor y = matmul(reshape(x, {rows, k}), w);
  Shape out_shape = x.shape();
  out_shape.back() = w.dim(1);
  return reshape(y, std::move(out_shape));
}

Tensor reduce(ReduceKind kind, const Tensor& a, std::size_t axis) {
  require_defined(a, "reduce");
  const AxisView v = axis_view(a.shape(), axis, "reduce");
  Shape shape = a.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  const double factor = kind == ReduceKind::kMean ? 1.0 / static_cast<double>(v.extent) : 1.0;
  std::vector<double> out(v.outer * v.inner, 0.0);
  auto av = a.values();
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t e = 0; e < v.extent; ++e) {
      const double* src = av.data() + (o * v.extent + e) * v.inner;
      double* dst = out.data() + o * v.inner;
      for (std::size_t i = 0; i < v.inner; ++i) dst[i] += src[i];
    }
  }
  if (kind == ReduceKind::kMean) {
    for (double& x : out) x *= factor;
  }
  return record_op(Tensor(std::move(shape), std::move(out)), {&a}, [&] {
    return [v, factor](std::span<const double> g, GradientSink& in) {
      auto ga = in[0];
      for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t e = 0; e < v.extent; ++e) {
          double* dst = ga.data() + (o * v.extent + e) * v.inner;
          const double* src = g.data() + o * v.inner;
          for (std::size_t i = 0; i < v.inner; ++i) dst[i] += factor * src[i];
        }
      }
    };
  });
}

Tensor sum(const Tensor& a, std::size_t axis) { return reduce(ReduceKind::kSum, a, axis); }
Tensor mean(const Tensor& a, std::size_t axis) { return reduce(ReduceKind::kMean, a, axis); }

Tensor sum_all(const Tensor& a) {
  require_defined(a, "sum_all");
  return sum(reshape(a, {a.size()}), 0);
}

Tensor softmax(const Tensor& a, std::size_t axis) {
  require_defined(a, "softmax");
  const AxisView v = axis_view(a.shape(), axis, "softmax");
  auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.extent * v.inner + i;
      double hi = av[base];
      for (std::size_t e = 1; e < v.extent; ++e) hi = std::max(hi, av[base + e * v.inner]);
      double total = 0.0;
      for (std::size_t e = 0; e < v.extent; ++e) {
        const double x = std::exp(av[base + e * v.inner] - hi);
        out[base + e * v.inner] = x;
        total += x;
      }
      for (std::size_t e = 0; e < v.extent; ++e) out[base + e * v.inner] /= total;
    }
  }
  Tensor result(a.shape(), std::move(out));
  return record_op(result, {&a}, [&] {
    return [v, y = result.detach()](std::span<const double> g, GradientSink& in) {
      auto ga = in[0];
      auto yv = y.values();
      for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t i = 0; i < v.inner; ++i) {
          const std::size_t base = o * v.extent * v.inner + i;
          double dot = 0.0;
          for (std::size_t e = 0; e < v.extent; ++e) dot += g[base + e * v.inner] * yv[base + e * v.inner];
          for (std::size_t e = 0; e < v.extent; ++e) {
            const std::size_t k = base + e * v.inner;
            ga[k] += yv[k] * (g[k] - dot);
          }
        }
      }
    };
  });
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

Tensor gelu(const Tensor& a) {
  require_defined(a, "gelu");
  std::vector<double> out(a.size());
  auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = gelu(av[i]);
  return record_op(Tensor(a.shape(), std::move(out)), {&a}, [&] {
    return [x = a.detach()](std::span<const double> g, GradientSink& in) {
      auto ga = in[0];
      auto xv = x.values();
      constexpr double kInvSqrt2Pi = 0.3989422804014327;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double z = xv[i];
        const double cdf = 0.5 * (1.0 + std::erf(z * std::numbers::sqrt2 / 2.0));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * z * z);
        ga[i] += g[i] * (cdf + z * pdf);
      }
    };
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  require_defined(a, "reshape");
  if (element_count(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  Tensor view = a.detach();
  Tensor result(std::move(shape), std::vector<double>(a.values().begin(), a.values().end()));
  return record_op(std::move(result), {&a}, [&] {
    return [](std::span<const double> g, GradientSink& in) {
      auto ga = in[0];
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    };
  });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  require_defined(a, "permute");
  const std::size_t r = a.rank();
  if (axes.size() != r) throw DimensionError("permute: axis list does not match rank of " + to_string(a.shape()));
  std::vector<bool> seen(r, false);
  for (std::size_t ax : axes) {
    if (ax >= r || seen[ax]) throw IndexError("permute: invalid axis permutation");
    seen[ax] = true;
  }
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * a.shape()[i];
  Shape out_shape(r);
  std::vector<std::size_t> strides(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = a.shape()[axes[i]];
    strides[i] = in_strides[axes[i]];
  }
  // source[i] is the input flat index of output element i.
  auto source = std::make_shared<std::vector<std::size_t>>(a.size());
  {
    std::vector<std::size_t> index(r, 0);
    std::size_t src = 0;
    for (std::size_t o = 0; o < a.size(); ++o) {
      (*source)[o] = src;
      for (std::size_t ax = r; ax-- > 0;) {
        ++index[ax];
        src += strides[ax];
        if (index[ax] < out_shape[ax]) break;
        src -= strides[ax] * out_shape[ax];
        index[ax] = 0;
      }
    }
  }
  auto av = a.values();
  std::vector<double> out(a.size());
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = av[(*source)[o]];
  return record_op(Tensor(std::move(out_shape), std::move(out)), {&a}, [&] {
    return [source](std::span<const double> g, GradientSink& in) {
      auto ga = in[0];
      for (std::size_t o = 0; o < g.size(); ++o) ga[(*source)[o]] += g[o];
    };
  });
}

Tensor transpose(const Tensor& a) {
  require_defined(a, "transpose");
  if (a.rank() < 2) throw DimensionError("transpose: needs rank ≥ 2, got " + to_string(a.shape()));
  std::vector<std::size_t> axes(a.rank());
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
  return permute(a, axes);
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no operands");
  for (const Tensor& p : parts) require_defined(p, "concat");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw IndexError("concat: axis out of range for " + to_string(first));
  Shape shape = first;
  shape[axis] = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != first.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < first.size(); ++i) {
      if (i != axis && p.shape()[i] != first[i]) {
        throw DimensionError("concat: cannot join " + to_string(p.shape()) + " with " + to_string(first));
      }
    }
    shape[axis] += p.shape()[axis];
  }
  const AxisView v = axis_view(first, axis, "concat");
  const std::size_t out_row = shape[axis] * v.inner;
  std::vector<double> out(element_count(shape));
  std::vector<std::size_t> widths;
  std::size_t col = 0;
  for (const Tensor& p : parts) {
    const std::size_t w = p.shape()[axis] * v.inner;
    auto pv = p.values();
    for (std::size_t o = 0; o < v.outer; ++o) {
      std::copy_n(pv.data() + o * w, w, out.data() + o * out_row + col);
    }
    widths.push_back(w);
    col += w;
  }
  Tensor result(std::move(shape), std::move(out));
  Tape* tape = nullptr;
  for (const Tensor& p : parts) {
    if (p.tape() == nullptr) continue;
    if (tape != nullptr && p.tape() != tape) throw Error("concat: operands belong to different tapes");
    tape = p.tape();
  }
  if (tape == nullptr) return result;
  std::vector<const Tensor*> inputs;
  for (const Tensor& p : parts) inputs.push_back(&p);
  const std::size_t outer = v.outer;
  return tape->record(std::move(result), inputs,
                      [widths, outer, out_row](std::span<const double> g, GradientSink& in) {
                        std::size_t col = 0;
                        for (std::size_t k = 0; k < widths.size(); ++k) {
                          auto gk = in[k];
                          if (!gk.empty()) {
                            for (std::size_t o = 0; o < outer; ++o) {
                              for (std::size_t c = 0; c < widths[k]; ++c) {
                                gk[o * widths[k] + c] += g[o * out_row + col + c];
                              }
                            }
                          }
                          col += widths[k];
                        }
                      });
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids) {
  require_defined(table, "gather_rows");
  if (table.rank() != 2) throw DimensionError("gather_rows: table must be rank 2, got " + to_string(table.shape()));
  if (ids.empty()) throw DimensionError("gather_rows: empty id list");
  const std::size_t rows = table.dim(0);
  const std::size_t cols = table.dim(1);
  std::vector<double> out(ids.size() * cols);
  auto tv = table.values();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= rows) {
      throw IndexError("gather_rows: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(rows) +
                       " rows");
    }
    std::copy_n(tv.data() + ids[i] * cols, cols, out.data() + i * cols);
  }
  return record_op(Tensor({ids.size(), cols}, std::move(out)), {&table}, [&] {
    return [ids = std::vector<std::size_t>(ids.begin(), ids.end()), cols](std::span<const double> g,
                                                                         GradientSink& in) {
      auto gt = in[0];
      for (std::size_t i = 0; i < ids.size(); ++i) {
        for (std::size_t c = 0; c < cols; ++c) gt[ids[i] * cols + c] += g[i * cols + c];
      }
    };
  });
}

}  // namespace geomf
