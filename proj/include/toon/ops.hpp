#pragma once

// Differentiable operation set over toon::Tensor. Every op computes its
// value eagerly; when a Tape is active and any input requires a gradient,
// a backward closure is recorded. Backward closures accumulate with +=
// so fan-out sums naturally.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "toon/tensor.hpp"

namespace toon {

namespace detail {

inline void check_finite(const Tensor& t, const char* op) {
  if (!t.all_finite())
    throw NumericError(std::string(op) + ": non-finite input value");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  Tensor out(a.shape());
  const long n = a.size();
  for (long i = 0; i < n; ++i) out[i] = a[i] + b[i];
  if (detail::tracing({&a, &b})) {
    out.set_requires_grad(true);
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    Tape::current()->record([ai, bi, oi] {
      if (!oi->has_grad()) return;
      const auto& g = oi->grad;
      if (ai->requires_grad) {
        auto& ga = ai->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bi->requires_grad) {
        auto& gb = bi->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  Tensor out(a.shape());
  const long n = a.size();
  for (long i = 0; i < n; ++i) out[i] = a[i] - b[i];
  if (detail::tracing({&a, &b})) {
    out.set_requires_grad(true);
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    Tape::current()->record([ai, bi, oi] {
      if (!oi->has_grad()) return;
      const auto& g = oi->grad;
      if (ai->requires_grad) {
        auto& ga = ai->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bi->requires_grad) {
        auto& gb = bi->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor out(a.shape());
  const long n = a.size();
  for (long i = 0; i < n; ++i) out[i] = a[i] * b[i];
  if (detail::tracing({&a, &b})) {
    out.set_requires_grad(true);
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    Tape::current()->record([ai, bi, oi] {
      if (!oi->has_grad()) return;
      const auto& g = oi->grad;
      if (ai->requires_grad) {
        auto& ga = ai->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bi->value[i];
      }
      if (bi->requires_grad) {
        auto& gb = bi->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ai->value[i];
      }
    });
  }
  return out;
}

// Elementwise quotient; the caller keeps the denominator away from zero.
inline Tensor div(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "div");
  Tensor out(a.shape());
  const long n = a.size();
  for (long i = 0; i < n; ++i) out[i] = a[i] / b[i];
  if (detail::tracing({&a, &b})) {
    out.set_requires_grad(true);
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    Tape::current()->record([ai, bi, oi] {
      if (!oi->has_grad()) return;
      const auto& g = oi->grad;
      if (ai->requires_grad) {
        auto& ga = ai->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bi->value[i];
      }
      if (bi->requires_grad) {
        auto& gb = bi->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) {
          const Real bv = bi->value[i];
          gb[i] -= g[i] * ai->value[i] / (bv * bv);
        }
      }
    });
  }
  return out;
}

inline Tensor add_scalar(const Tensor& a, Real c) {
  Tensor out(a.shape());
  const long n = a.size();
  for (long i = 0; i < n; ++i) out[i] = a[i] + c;
  if (detail::tracing({&a})) {
    out.set_requires_grad(true);
    auto ai = a.impl(), oi = out.impl();
    Tape::current()->record([ai, oi] {
      if (!oi->has_grad() || !ai->requires_grad) return;
      auto& ga = ai->ensure_grad();
      for (size_t i = 0; i < oi->grad.size(); ++i) ga[i] += oi->grad[i];
    });
  }
  return out;
}

inline Tensor mul_scalar(const Tensor& a, Real c) {
  Tensor out(a.shape());
  const long n = a.size();
  for (long i = 0; i < n; ++i) out[i] = a[i] * c;
  if (detail::tracing({&a})) {
    out.set_requires_grad(true);
    auto ai = a.impl(), oi = out.impl();
    Tape::current()->record([ai, oi, c] {
      if (!oi->has_grad() || !ai->requires_grad) return;
      auto& ga = ai->ensure_grad();
      for (size_t i = 0; i < oi->grad.size(); ++i) ga[i] += oi->grad[i] * c;
    });
  }
  return out;
}

inline Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

// |x|; subgradient 0 at the origin.
inline Tensor abs_of(const Tensor& a) {
  Tensor out(a.shape());
  const long n = a.size();
  for (long i = 0; i < n; ++i) out[i] = std::fabs(a[i]);
  if (detail::tracing({&a})) {
    out.set_requires_grad(true);
    auto ai = a.impl(), oi = out.impl();
    Tape::current()->record([ai, oi] {
      if (!oi->has_grad() || !ai->requires_grad) return;
      auto& ga = ai->ensure_grad();
      for (size_t i = 0; i < oi->grad.size(); ++i) {
        const Real v = ai->value[i];
        const Real s = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
        ga[i] += oi->grad[i] * s;
      }
    });
  }
  return out;
}

// sqrt; the caller keeps inputs non-negative (clamp first when in doubt).
inline Tensor sqrt_of(const Tensor& a) {
  Tensor out(a.shape());
  const long n = a.size();
  for (long i = 0; i < n; ++i) out[i] = std::sqrt(a[i]);
  if (detail::tracing({&a})) {
    out.set_requires_grad(true);
    auto ai = a.impl(), oi = out.impl();
    Tape::current()->record([ai, oi] {
      if (!oi->has_grad() || !ai->requires_grad) return;
      auto& ga = ai->ensure_grad();
      for (size_t i = 0; i < oi->grad.size(); ++i)
        ga[i] += oi->grad[i] * 0.5 / oi->value[i];
    });
  }
  return out;
}

// Natural log; the caller keeps inputs positive (probabilities are clamped).
inline Tensor log_of(const Tensor& a) {
  Tensor out(a.shape());
  const long n = a.size();
  for (long i = 0; i < n; ++i) out[i] = std::log(a[i]);
  if (detail::tracing({&a})) {
    out.set_requires_grad(true);
    auto ai = a.impl(), oi = out.impl();
    Tape::current()->record([ai, oi] {
      if (!oi->has_grad() || !ai->requires_grad) return;
      auto& ga = ai->ensure_grad();
      for (size_t i = 0; i < oi->grad.size(); ++i)
        ga[i] += oi->grad[i] / ai->value[i];
    });
  }
  return out;
}

inline Tensor sigmoid(const Tensor& a) {
  Tensor out(a.shape());
  const long n = a.size();
  for (long i = 0; i < n; ++i) {
    const Real x = a[i];
    if (x >= 0.0) {
      out[i] = 1.0 / (1.0 + std::exp(-x));
    } else {
      const Real e = std::exp(x);
      out[i] = e / (1.0 + e);
    }
  }
  if (detail::tracing({&a})) {
    out.set_requires_grad(true);
    auto ai = a.impl(), oi = out.impl();
    Tape::current()->record([ai, oi] {
      if (!oi->has_grad() || !ai->requires_grad) return;
      auto& ga = ai->ensure_grad();
      for (size_t i = 0; i < oi->grad.size(); ++i) {
        const Real y = oi->value[i];
        ga[i] += oi->grad[i] * y * (1.0 - y);
      }
    });
  }
  return out;
}

// Clamp to [lo, hi]; gradient passes inside the band, is zero outside.
inline Tensor clamp(const Tensor& a, Real lo, Real hi) {
  Tensor out(a.shape());
  const long n = a.size();
  for (long i = 0; i < n; ++i) out[i] = std::min(hi, std::max(lo, a[i]));
  if (detail::tracing({&a})) {
    out.set_requires_grad(true);
    auto ai = a.impl(), oi = out.impl();
    Tape::current()->record([ai, oi, lo, hi] {
      if (!oi->has_grad() || !ai->requires_grad) return;
      auto& ga = ai->ensure_grad();
      for (size_t i = 0; i < oi->grad.size(); ++i) {
        const Real v = ai->value[i];
        if (v >= lo && v <= hi) ga[i] += oi->grad[i];
      }
    });
  }
  return out;
}

inline Tensor clamp_min(const Tensor& a, Real lo) {
  Tensor out(a.shape());
  const long n = a.size();
  for (long i = 0; i < n; ++i) out[i] = std::max(lo, a[i]);
  if (detail::tracing({&a})) {
    out.set_requires_grad(true);
    auto ai = a.impl(), oi = out.impl();
    Tape::current()->record([ai, oi, lo] {
      if (!oi->has_grad() || !ai->requires_grad) return;
      auto& ga = ai->ensure_grad();
      for (size_t i = 0; i < oi->grad.size(); ++i)
        if (ai->value[i] >= lo) ga[i] += oi->grad[i];
    });
  }
  return out;
}

// max(x, slope*x); the subgradient at exactly 0 is `slope`.
inline Tensor leaky_relu(const Tensor& a, Real slope) {
  if (!(slope > 0.0 && slope < 1.0))
    throw ContractError("leaky_relu: slope must lie in (0, 1)");
  Tensor out(a.shape());
  const long n = a.size();
  for (long i = 0; i < n; ++i) {
    const Real x = a[i];
    out[i] = x > 0.0 ? x : slope * x;
  }
  if (detail::tracing({&a})) {
    out.set_requires_grad(true);
    auto ai = a.impl(), oi = out.impl();
    Tape::current()->record([ai, oi, slope] {
      if (!oi->has_grad() || !ai->requires_grad) return;
      auto& ga = ai->ensure_grad();
      for (size_t i = 0; i < oi->grad.size(); ++i)
        ga[i] += oi->grad[i] * (ai->value[i] > 0.0 ? 1.0 : slope);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, std::vector<int> new_shape) {
  if (shape_numel(new_shape) != a.size())
    throw DimensionError("reshape: element count changes");
  Tensor out(std::move(new_shape), a.values());
  if (detail::tracing({&a})) {
    out.set_requires_grad(true);
    auto ai = a.impl(), oi = out.impl();
    Tape::current()->record([ai, oi] {
      if (!oi->has_grad() || !ai->requires_grad) return;
      auto& ga = ai->ensure_grad();
      for (size_t i = 0; i < oi->grad.size(); ++i) ga[i] += oi->grad[i];
    });
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("transpose: expects a rank-2 tensor");
  const int m = a.dim(0), n = a.dim(1);
  Tensor out({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<long>(j) * m + i] = a[static_cast<long>(i) * n + j];
  if (detail::tracing({&a})) {
    out.set_requires_grad(true);
    auto ai = a.impl(), oi = out.impl();
    Tape::current()->record([ai, oi, m, n] {
      if (!oi->has_grad() || !ai->requires_grad) return;
      auto& ga = ai->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          ga[static_cast<size_t>(i) * n + j] += oi->grad[static_cast<size_t>(j) * m + i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

enum class Reduce { Sum, Mean, L1 };

// Reduces the listed axes away. L1 is the mean of absolute values over the
// reduced elements.
inline Tensor reduce(const Tensor& x, Reduce kind, std::vector<int> axes) {
  const int r = x.rank();
  if (axes.empty()) throw DimensionError("reduce: empty reduction");
  std::sort(axes.begin(), axes.end());
  for (size_t i = 0; i < axes.size(); ++i) {
    if (axes[i] < 0 || axes[i] >= r) throw DimensionError("reduce: axis out of range");
    if (i > 0 && axes[i] == axes[i - 1]) throw DimensionError("reduce: duplicate axis");
  }

  std::vector<bool> reduced(static_cast<size_t>(r), false);
  for (int a : axes) reduced[static_cast<size_t>(a)] = true;

  std::vector<int> out_shape;
  long count = 1;
  for (int d = 0; d < r; ++d) {
    if (reduced[static_cast<size_t>(d)])
      count *= x.dim(d);
    else
      out_shape.push_back(x.dim(d));
  }

  // Strides of the output tensor laid over the kept input dims.
  std::vector<long> in_stride(static_cast<size_t>(r), 1);
  for (int d = r - 2; d >= 0; --d)
    in_stride[static_cast<size_t>(d)] = in_stride[static_cast<size_t>(d) + 1] * x.dim(d + 1);
  std::vector<long> out_stride_for_dim(static_cast<size_t>(r), 0);
  {
    long s = 1;
    for (int d = r - 1; d >= 0; --d) {
      if (!reduced[static_cast<size_t>(d)]) {
        out_stride_for_dim[static_cast<size_t>(d)] = s;
        s *= x.dim(d);
      }
    }
  }

  Tensor out(out_shape);
  const long n = x.size();
  std::vector<int> idx(static_cast<size_t>(r), 0);
  for (long flat = 0; flat < n; ++flat) {
    long of = 0;
    long rem = flat;
    for (int d = 0; d < r; ++d) {
      const long id = rem / in_stride[static_cast<size_t>(d)];
      rem -= id * in_stride[static_cast<size_t>(d)];
      of += id * out_stride_for_dim[static_cast<size_t>(d)];
    }
    const Real v = x[flat];
    out[of] += (kind == Reduce::L1) ? std::fabs(v) : v;
  }
  if (kind != Reduce::Sum) {
    const Real inv = 1.0 / static_cast<Real>(count);
    for (long i = 0; i < out.size(); ++i) out[i] *= inv;
  }

  if (detail::tracing({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    Tape::current()->record([xi, oi, kind, count, in_stride, out_stride_for_dim, r] {
      if (!oi->has_grad() || !xi->requires_grad) return;
      auto& gx = xi->ensure_grad();
      const Real inv = 1.0 / static_cast<Real>(count);
      const long n2 = static_cast<long>(xi->value.size());
      for (long flat = 0; flat < n2; ++flat) {
        long of = 0;
        long rem = flat;
        for (int d = 0; d < r; ++d) {
          const long id = rem / in_stride[static_cast<size_t>(d)];
          rem -= id * in_stride[static_cast<size_t>(d)];
          of += id * out_stride_for_dim[static_cast<size_t>(d)];
        }
        const Real g = oi->grad[static_cast<size_t>(of)];
        switch (kind) {
          case Reduce::Sum:
            gx[static_cast<size_t>(flat)] += g;
            break;
          case Reduce::Mean:
            gx[static_cast<size_t>(flat)] += g * inv;
            break;
          case Reduce::L1: {
            const Real v = xi->value[static_cast<size_t>(flat)];
            const Real s = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
            gx[static_cast<size_t>(flat)] += g * s * inv;
            break;
          }
        }
      }
    });
  }
  return out;
}

inline std::vector<int> all_axes(const Tensor& x) {
  std::vector<int> axes(static_cast<size_t>(x.rank()));
  for (int i = 0; i < x.rank(); ++i) axes[static_cast<size_t>(i)] = i;
  return axes;
}

inline Tensor sum_all(const Tensor& x) { return reduce(x, Reduce::Sum, all_axes(x)); }
inline Tensor mean_all(const Tensor& x) { return reduce(x, Reduce::Mean, all_axes(x)); }
inline Tensor l1_all(const Tensor& x) { return reduce(x, Reduce::L1, all_axes(x)); }

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw DimensionError("matmul: expects rank-2 tensors");
  if (a.dim(1) != b.dim(0))
    throw DimensionError("matmul: inner dimensions differ");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  const Real* pa = a.data();
  const Real* pb = b.data();
  Real* po = out.data();
  for (int i = 0; i < m; ++i) {
    Real* orow = po + static_cast<long>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const Real av = pa[static_cast<long>(i) * k + kk];
      const Real* brow = pb + static_cast<long>(kk) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  if (detail::tracing({&a, &b})) {
    out.set_requires_grad(true);
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    Tape::current()->record([ai, bi, oi, m, k, n] {
      if (!oi->has_grad()) return;
      const Real* g = oi->grad.data();
      if (ai->requires_grad) {
        auto& ga = ai->ensure_grad();
        // dA = dC * B^T
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) {
            const Real gv = g[static_cast<long>(i) * n + j];
            const Real* brow = bi->value.data();
            for (int kk = 0; kk < k; ++kk)
              ga[static_cast<size_t>(i) * k + kk] += gv * brow[static_cast<long>(kk) * n + j];
          }
      }
      if (bi->requires_grad) {
        auto& gb = bi->ensure_grad();
        // dB = A^T * dC
        for (int kk = 0; kk < k; ++kk)
          for (int i = 0; i < m; ++i) {
            const Real av = ai->value[static_cast<size_t>(i) * k + kk];
            const Real* grow = g + static_cast<long>(i) * n;
            for (int j = 0; j < n; ++j)
              gb[static_cast<size_t>(kk) * n + j] += av * grow[j];
          }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalizations
// ---------------------------------------------------------------------------

// Exp-normalization along one axis with the max-subtraction trick.
inline Tensor softmax(const Tensor& x, int axis) {
  const int r = x.rank();
  if (axis < 0 || axis >= r) throw DimensionError("softmax: axis out of range");
  const int d = x.dim(axis);
  long inner = 1, outer = 1;
  for (int i = axis + 1; i < r; ++i) inner *= x.dim(i);
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);

  Tensor out(x.shape());
  for (long o = 0; o < outer; ++o) {
    for (long in = 0; in < inner; ++in) {
      const long base = o * d * inner + in;
      Real mx = x[base];
      for (int j = 1; j < d; ++j) mx = std::max(mx, x[base + j * inner]);
      Real sum = 0.0;
      for (int j = 0; j < d; ++j) {
        const Real e = std::exp(x[base + j * inner] - mx);
        out[base + j * inner] = e;
        sum += e;
      }
      const Real inv = 1.0 / sum;
      for (int j = 0; j < d; ++j) out[base + j * inner] *= inv;
    }
  }
  if (detail::tracing({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    Tape::current()->record([xi, oi, d, inner, outer] {
      if (!oi->has_grad() || !xi->requires_grad) return;
      auto& gx = xi->ensure_grad();
      for (long o = 0; o < outer; ++o) {
        for (long in = 0; in < inner; ++in) {
          const long base = o * d * inner + in;
          Real dot = 0.0;
          for (int j = 0; j < d; ++j)
            dot += oi->grad[static_cast<size_t>(base + j * inner)] *
                   oi->value[static_cast<size_t>(base + j * inner)];
          for (int j = 0; j < d; ++j) {
            const size_t at = static_cast<size_t>(base + j * inner);
            gx[at] += oi->value[at] * (oi->grad[at] - dot);
          }
        }
      }
    });
  }
  return out;
}

// x / max(||x||_2, eps) along one axis.
inline Tensor l2_normalize(const Tensor& x, int axis, Real eps = 1e-8) {
  if (!(eps > 0.0)) throw ContractError("l2_normalize: eps must be positive");
  const int r = x.rank();
  if (axis < 0 || axis >= r) throw DimensionError("l2_normalize: axis out of range");
  const int d = x.dim(axis);
  long inner = 1, outer = 1;
  for (int i = axis + 1; i < r; ++i) inner *= x.dim(i);
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);

  Tensor out(x.shape());
  std::vector<Real> norms(static_cast<size_t>(outer * inner));
  for (long o = 0; o < outer; ++o) {
    for (long in = 0; in < inner; ++in) {
      const long base = o * d * inner + in;
      Real ss = 0.0;
      for (int j = 0; j < d; ++j) {
        const Real v = x[base + j * inner];
        ss += v * v;
      }
      const Real norm = std::sqrt(ss);
      const Real denom = std::max(norm, eps);
      norms[static_cast<size_t>(o * inner + in)] = norm;
      const Real inv = 1.0 / denom;
      for (int j = 0; j < d; ++j) out[base + j * inner] = x[base + j * inner] * inv;
    }
  }
  if (detail::tracing({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    Tape::current()->record([xi, oi, d, inner, outer, eps, norms] {
      if (!oi->has_grad() || !xi->requires_grad) return;
      auto& gx = xi->ensure_grad();
      for (long o = 0; o < outer; ++o) {
        for (long in = 0; in < inner; ++in) {
          const long base = o * d * inner + in;
          const Real norm = norms[static_cast<size_t>(o * inner + in)];
          if (norm >= eps) {
            // y = x / n: dx = (g - y <g,y>) / n
            Real dot = 0.0;
            for (int j = 0; j < d; ++j)
              dot += oi->grad[static_cast<size_t>(base + j * inner)] *
                     oi->value[static_cast<size_t>(base + j * inner)];
            const Real inv = 1.0 / norm;
            for (int j = 0; j < d; ++j) {
              const size_t at = static_cast<size_t>(base + j * inner);
              gx[at] += (oi->grad[at] - oi->value[at] * dot) * inv;
            }
          } else {
            const Real inv = 1.0 / eps;
            for (int j = 0; j < d; ++j) {
              const size_t at = static_cast<size_t>(base + j * inner);
              gx[at] += oi->grad[at] * inv;
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Spatial operations on [C, H, W] tensors
// ---------------------------------------------------------------------------

// Cross-correlation with zero padding. weight is [C_out, C_in, k, k] with
// odd k; H' = (H + 2*padding - k) / stride + 1.
inline Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
                     int stride = 1, int padding = 0) {
  if (input.rank() != 3) throw DimensionError("conv2d: input must be [C,H,W]");
  if (weight.rank() != 4) throw DimensionError("conv2d: weight must be [Co,Ci,k,k]");
  if (bias.rank() != 1) throw DimensionError("conv2d: bias must be [Co]");
  const int ci_n = input.dim(0), h = input.dim(1), w = input.dim(2);
  const int co_n = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != ci_n) throw DimensionError("conv2d: channel mismatch");
  if (weight.dim(3) != k || k % 2 == 0) throw DimensionError("conv2d: kernel must be square and odd");
  if (bias.dim(0) != co_n) throw DimensionError("conv2d: bias size mismatch");
  if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
  if (padding < 0) throw ContractError("conv2d: padding must be >= 0");
  const int ho = (h + 2 * padding - k) / stride + 1;
  const int wo = (w + 2 * padding - k) / stride + 1;
  if (ho < 1 || wo < 1) throw DimensionError("conv2d: empty output");
  detail::check_finite(input, "conv2d");
  detail::check_finite(weight, "conv2d");
  detail::check_finite(bias, "conv2d");

  Tensor out({co_n, ho, wo});
  const Real* x = input.data();
  const Real* wt = weight.data();
  Real* y = out.data();
  for (int co = 0; co < co_n; ++co) {
    const Real b = bias[co];
    Real* plane = y + static_cast<long>(co) * ho * wo;
    for (long i = 0; i < static_cast<long>(ho) * wo; ++i) plane[i] = b;
  }
  for (int co = 0; co < co_n; ++co) {
    for (int ci = 0; ci < ci_n; ++ci) {
      const Real* xplane = x + static_cast<long>(ci) * h * w;
      for (int ky = 0; ky < k; ++ky) {
        const int dy = ky - padding;
        int oy0 = dy < 0 ? (-dy + stride - 1) / stride : 0;
        int oy1 = (h - 1 - dy) / stride;
        if (oy1 > ho - 1) oy1 = ho - 1;
        for (int kx = 0; kx < k; ++kx) {
          const int dx = kx - padding;
          int ox0 = dx < 0 ? (-dx + stride - 1) / stride : 0;
          int ox1 = (w - 1 - dx) / stride;
          if (ox1 > wo - 1) ox1 = wo - 1;
          const Real wv = wt[((static_cast<long>(co) * ci_n + ci) * k + ky) * k + kx];
          for (int oy = oy0; oy <= oy1; ++oy) {
            const Real* xrow = xplane + static_cast<long>(oy * stride + dy) * w;
            Real* yrow = y + (static_cast<long>(co) * ho + oy) * wo;
            int ix = ox0 * stride + dx;
            for (int ox = ox0; ox <= ox1; ++ox, ix += stride) yrow[ox] += wv * xrow[ix];
          }
        }
      }
    }
  }

  if (detail::tracing({&input, &weight, &bias})) {
    out.set_requires_grad(true);
    auto xi = input.impl(), wi = weight.impl(), bi = bias.impl(), oi = out.impl();
    Tape::current()->record([xi, wi, bi, oi, ci_n, h, w, co_n, k, stride, padding, ho, wo] {
      if (!oi->has_grad()) return;
      const Real* g = oi->grad.data();
      if (bi->requires_grad) {
        auto& gb = bi->ensure_grad();
        for (int co = 0; co < co_n; ++co) {
          const Real* plane = g + static_cast<long>(co) * ho * wo;
          Real acc = 0.0;
          for (long i = 0; i < static_cast<long>(ho) * wo; ++i) acc += plane[i];
          gb[static_cast<size_t>(co)] += acc;
        }
      }
      const bool need_w = wi->requires_grad;
      const bool need_x = xi->requires_grad;
      if (!need_w && !need_x) return;
      Real* gw = need_w ? wi->ensure_grad().data() : nullptr;
      Real* gx = need_x ? xi->ensure_grad().data() : nullptr;
      const Real* xv = xi->value.data();
      const Real* wv_all = wi->value.data();
      for (int co = 0; co < co_n; ++co) {
        for (int ci = 0; ci < ci_n; ++ci) {
          for (int ky = 0; ky < k; ++ky) {
            const int dy = ky - padding;
            int oy0 = dy < 0 ? (-dy + stride - 1) / stride : 0;
            int oy1 = (h - 1 - dy) / stride;
            if (oy1 > ho - 1) oy1 = ho - 1;
            for (int kx = 0; kx < k; ++kx) {
              const int dx = kx - padding;
              int ox0 = dx < 0 ? (-dx + stride - 1) / stride : 0;
              int ox1 = (w - 1 - dx) / stride;
              if (ox1 > wo - 1) ox1 = wo - 1;
              const long widx = ((static_cast<long>(co) * ci_n + ci) * k + ky) * k + kx;
              const Real wcur = wv_all[widx];
              Real wacc = 0.0;
              for (int oy = oy0; oy <= oy1; ++oy) {
                const long xrow = (static_cast<long>(ci) * h + oy * stride + dy) * w;
                const Real* grow = g + (static_cast<long>(co) * ho + oy) * wo;
                int ix = ox0 * stride + dx;
                for (int ox = ox0; ox <= ox1; ++ox, ix += stride) {
                  const Real gv = grow[ox];
                  if (need_w) wacc += gv * xv[xrow + ix];
                  if (need_x) gx[xrow + ix] += gv * wcur;
                }
              }
              if (need_w) gw[widx] += wacc;
            }
          }
        }
      }
    });
  }
  return out;
}

// Corner-aligned bilinear resize by a positive factor; factor 1 is an
// exact identity.
inline Tensor resize_bilinear(const Tensor& x, Real factor) {
  if (x.rank() != 3) throw DimensionError("resize_bilinear: input must be [C,H,W]");
  if (!(factor > 0.0)) throw ContractError("resize_bilinear: factor must be positive");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int ho = static_cast<int>(std::lround(h * factor));
  const int wo = static_cast<int>(std::lround(w * factor));
  if (ho < 1 || wo < 1) throw DimensionError("resize_bilinear: degenerate output shape");

  const Real sy = ho > 1 ? static_cast<Real>(h - 1) / static_cast<Real>(ho - 1) : 0.0;
  const Real sx = wo > 1 ? static_cast<Real>(w - 1) / static_cast<Real>(wo - 1) : 0.0;

  // Sample positions and weights are shared between forward and backward.
  std::vector<int> y0(static_cast<size_t>(ho)), x0(static_cast<size_t>(wo));
  std::vector<Real> wy(static_cast<size_t>(ho)), wx(static_cast<size_t>(wo));
  for (int oy = 0; oy < ho; ++oy) {
    Real fy = sy * oy;
    int iy = static_cast<int>(fy);
    if (iy > h - 2) iy = h - 2;
    if (iy < 0) iy = 0;
    y0[static_cast<size_t>(oy)] = h == 1 ? 0 : iy;
    wy[static_cast<size_t>(oy)] = h == 1 ? 0.0 : fy - iy;
  }
  for (int ox = 0; ox < wo; ++ox) {
    Real fx = sx * ox;
    int ix = static_cast<int>(fx);
    if (ix > w - 2) ix = w - 2;
    if (ix < 0) ix = 0;
    x0[static_cast<size_t>(ox)] = w == 1 ? 0 : ix;
    wx[static_cast<size_t>(ox)] = w == 1 ? 0.0 : fx - ix;
  }

  Tensor out({c, ho, wo});
  for (int cc = 0; cc < c; ++cc) {
    const Real* plane = x.data() + static_cast<long>(cc) * h * w;
    Real* oplane = out.data() + static_cast<long>(cc) * ho * wo;
    for (int oy = 0; oy < ho; ++oy) {
      const int iy = y0[static_cast<size_t>(oy)];
      const Real ty = wy[static_cast<size_t>(oy)];
      const Real* r0 = plane + static_cast<long>(iy) * w;
      const Real* r1 = plane + static_cast<long>(std::min(iy + 1, h - 1)) * w;
      for (int ox = 0; ox < wo; ++ox) {
        const int ix = x0[static_cast<size_t>(ox)];
        const int ix1 = std::min(ix + 1, w - 1);
        const Real tx = wx[static_cast<size_t>(ox)];
        const Real top = r0[ix] + (r0[ix1] - r0[ix]) * tx;
        const Real bot = r1[ix] + (r1[ix1] - r1[ix]) * tx;
        oplane[static_cast<long>(oy) * wo + ox] = top + (bot - top) * ty;
      }
    }
  }

  if (detail::tracing({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    Tape::current()->record([xi, oi, c, h, w, ho, wo, y0, x0, wy, wx] {
      if (!oi->has_grad() || !xi->requires_grad) return;
      auto& gx = xi->ensure_grad();
      for (int cc = 0; cc < c; ++cc) {
        Real* gplane = gx.data() + static_cast<long>(cc) * h * w;
        const Real* gout = oi->grad.data() + static_cast<long>(cc) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = y0[static_cast<size_t>(oy)];
          const int iy1 = std::min(iy + 1, h - 1);
          const Real ty = wy[static_cast<size_t>(oy)];
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = x0[static_cast<size_t>(ox)];
            const int ix1 = std::min(ix + 1, w - 1);
            const Real tx = wx[static_cast<size_t>(ox)];
            const Real g = gout[static_cast<long>(oy) * wo + ox];
            gplane[static_cast<long>(iy) * w + ix] += g * (1 - ty) * (1 - tx);
            gplane[static_cast<long>(iy) * w + ix1] += g * (1 - ty) * tx;
            gplane[static_cast<long>(iy1) * w + ix] += g * ty * (1 - tx);
            gplane[static_cast<long>(iy1) * w + ix1] += g * ty * tx;
          }
        }
      }
    });
  }
  return out;
}

namespace detail {

// Window sum along rows then columns, window half-width r, shrink-to-valid
// at the borders. dst may not alias src.
inline void box_window_sum(const Real* src, Real* dst, int h, int w, int r,
                           std::vector<Real>& scratch) {
  scratch.assign(static_cast<size_t>(h) * w, 0.0);
  for (int y = 0; y < h; ++y) {
    const Real* row = src + static_cast<long>(y) * w;
    Real* trow = scratch.data() + static_cast<long>(y) * w;
    for (int x = 0; x < w; ++x) {
      const int x0 = std::max(0, x - r), x1 = std::min(w - 1, x + r);
      Real s = 0.0;
      for (int xx = x0; xx <= x1; ++xx) s += row[xx];
      trow[x] = s;
    }
  }
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) {
      const int y0 = std::max(0, y - r), y1 = std::min(h - 1, y + r);
      Real s = 0.0;
      for (int yy = y0; yy <= y1; ++yy) s += scratch[static_cast<size_t>(yy) * w + x];
      dst[static_cast<long>(y) * w + x] = s;
    }
  }
}

}  // namespace detail

// Mean over the (2r+1)^2 window clipped to the image bounds; border
// windows average valid pixels only, so a constant image stays constant.
inline Tensor box_filter(const Tensor& x, int radius) {
  if (x.rank() != 3) throw DimensionError("box_filter: input must be [C,H,W]");
  if (radius < 0) throw ContractError("box_filter: radius must be >= 0");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (radius > h && radius > w)
    throw DimensionError("box_filter: radius exceeds both image dimensions");

  Tensor out(x.shape());
  if (radius == 0) {
    std::copy(x.data(), x.data() + x.size(), out.data());
  } else {
    std::vector<Real> scratch;
    for (int cc = 0; cc < c; ++cc) {
      const Real* plane = x.data() + static_cast<long>(cc) * h * w;
      Real* oplane = out.data() + static_cast<long>(cc) * h * w;
      // Constant plane short-circuit keeps "mean of constants" bit-exact.
      Real mn = plane[0], mx = plane[0];
      for (long i = 1; i < static_cast<long>(h) * w; ++i) {
        mn = std::min(mn, plane[i]);
        mx = std::max(mx, plane[i]);
      }
      if (mn == mx) {
        for (long i = 0; i < static_cast<long>(h) * w; ++i) oplane[i] = mn;
        continue;
      }
      detail::box_window_sum(plane, oplane, h, w, radius, scratch);
      for (int y = 0; y < h; ++y) {
        const int ny = std::min(h - 1, y + radius) - std::max(0, y - radius) + 1;
        for (int x2 = 0; x2 < w; ++x2) {
          const int nx = std::min(w - 1, x2 + radius) - std::max(0, x2 - radius) + 1;
          oplane[static_cast<long>(y) * w + x2] /= static_cast<Real>(ny) * nx;
        }
      }
    }
  }

  if (detail::tracing({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    const int r = radius;
    Tape::current()->record([xi, oi, c, h, w, r] {
      if (!oi->has_grad() || !xi->requires_grad) return;
      auto& gx = xi->ensure_grad();
      if (r == 0) {
        for (size_t i = 0; i < gx.size(); ++i) gx[i] += oi->grad[i];
        return;
      }
      // d/dx of the mean: scatter g/count back over each window, which is
      // again a box window sum of the normalized gradient.
      std::vector<Real> norm(static_cast<size_t>(h) * w);
      std::vector<Real> acc(static_cast<size_t>(h) * w);
      std::vector<Real> scratch;
      for (int cc = 0; cc < c; ++cc) {
        const Real* gplane = oi->grad.data() + static_cast<long>(cc) * h * w;
        for (int y = 0; y < h; ++y) {
          const int ny = std::min(h - 1, y + r) - std::max(0, y - r) + 1;
          for (int x2 = 0; x2 < w; ++x2) {
            const int nx = std::min(w - 1, x2 + r) - std::max(0, x2 - r) + 1;
            norm[static_cast<size_t>(y) * w + x2] =
                gplane[static_cast<long>(y) * w + x2] / (static_cast<Real>(ny) * nx);
          }
        }
        detail::box_window_sum(norm.data(), acc.data(), h, w, r, scratch);
        Real* gxp = gx.data() + static_cast<long>(cc) * h * w;
        for (long i = 0; i < static_cast<long>(h) * w; ++i) gxp[i] += acc[i];
      }
    });
  }
  return out;
}

// Rec. 601 luma: 0.299 R + 0.587 G + 0.114 B.
inline Tensor rgb_to_gray(const Tensor& x) {
  if (x.rank() != 3 || x.dim(0) != 3)
    throw DimensionError("rgb_to_gray: input must be [3,H,W]");
  const int h = x.dim(1), w = x.dim(2);
  const long plane = static_cast<long>(h) * w;
  Tensor out({1, h, w});
  const Real* r = x.data();
  const Real* g = r + plane;
  const Real* b = g + plane;
  for (long i = 0; i < plane; ++i) out[i] = 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i];
  if (detail::tracing({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    Tape::current()->record([xi, oi, plane] {
      if (!oi->has_grad() || !xi->requires_grad) return;
      auto& gx = xi->ensure_grad();
      for (long i = 0; i < plane; ++i) {
        const Real gv = oi->grad[static_cast<size_t>(i)];
        gx[static_cast<size_t>(i)] += 0.299 * gv;
        gx[static_cast<size_t>(plane + i)] += 0.587 * gv;
        gx[static_cast<size_t>(2 * plane + i)] += 0.114 * gv;
      }
    });
  }
  return out;
}

}  // namespace toon
