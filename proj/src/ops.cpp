#include "ordalign/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <initializer_list>
#include <string>

namespace ordalign {

namespace {

template <typename T>
void ensure_grad(const std::shared_ptr<StorageT<T>>& s) {
  if (s->grad.empty()) s->grad.assign(s->data.size(), T(0));
}

template <typename T>
bool tracking(std::initializer_list<const TensorT<T>*> inputs) {
  if (!TapeT<T>::current()) return false;
  for (const auto* t : inputs)
    if (t->needs_grad()) return true;
  return false;
}

template <typename T>
void check_defined(const TensorT<T>& t, const char* op) {
  if (!t.defined()) throw UsageError(std::string(op) + ": undefined tensor argument");
}

// Generic unary elementwise op. dfdx(x, y) is the local derivative.
template <typename T, typename F, typename DF>
TensorT<T> unary_op(const char* name, const TensorT<T>& x, F f, DF dfdx) {
  check_defined(x, name);
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  const T* xp = x.data().data();
  T* op_ = out.data().data();
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) op_[i] = f(xp[i]);
  if (tracking<T>({&x})) {
    out.set_needs_grad(true);
    TapeT<T>::current()->record([xs = x.storage(), os = out.storage(), dfdx]() {
      if (os->grad.empty() || !xs->needs_grad) return;
      ensure_grad(xs);
      const std::size_t n = xs->data.size();
      for (std::size_t i = 0; i < n; ++i)
        xs->grad[i] += os->grad[i] * dfdx(xs->data[i], os->data[i]);
    });
  }
  return out;
}

// Generic binary elementwise op with 1-element broadcast on either side.
template <typename T, typename F, typename DA, typename DB>
TensorT<T> binary_op(const char* name, const TensorT<T>& a, const TensorT<T>& b, F f, DA dfda,
                     DB dfdb) {
  check_defined(a, name);
  check_defined(b, name);
  const bool a_scalar = a.numel() == 1;
  const bool b_scalar = b.numel() == 1;
  if (!a_scalar && !b_scalar && a.shape() != b.shape())
    throw DimensionError(std::string(name) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  const Shape& out_shape = b_scalar ? a.shape() : b.shape();
  TensorT<T> out = TensorT<T>::zeros(out_shape);
  const T* ap = a.data().data();
  const T* bp = b.data().data();
  T* op_ = out.data().data();
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const T av = ap[a_scalar ? 0 : i];
    const T bv = bp[b_scalar ? 0 : i];
    op_[i] = f(av, bv);
  }
  if (tracking<T>({&a, &b})) {
    out.set_needs_grad(true);
    TapeT<T>::current()->record(
        [as = a.storage(), bs = b.storage(), os = out.storage(), a_scalar, b_scalar, dfda, dfdb]() {
          if (os->grad.empty()) return;
          const std::size_t n = os->data.size();
          if (as->needs_grad) {
            ensure_grad(as);
            for (std::size_t i = 0; i < n; ++i) {
              const T av = as->data[a_scalar ? 0 : i];
              const T bv = bs->data[b_scalar ? 0 : i];
              as->grad[a_scalar ? 0 : i] += os->grad[i] * dfda(av, bv);
            }
          }
          if (bs->needs_grad) {
            ensure_grad(bs);
            for (std::size_t i = 0; i < n; ++i) {
              const T av = as->data[a_scalar ? 0 : i];
              const T bv = bs->data[b_scalar ? 0 : i];
              bs->grad[b_scalar ? 0 : i] += os->grad[i] * dfdb(av, bv);
            }
          }
        });
  }
  return out;
}

}  // namespace

template <typename T>
TensorT<T> matmul(const TensorT<T>& x, const TensorT<T>& w) {
  check_defined(x, "matmul");
  check_defined(w, "matmul");
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0))
    throw DimensionError("matmul: incompatible shapes " + shape_str(x.shape()) + " vs " +
                         shape_str(w.shape()));
  const std::size_t b = x.dim(0), inner = x.dim(1), o = w.dim(1);
  TensorT<T> out = TensorT<T>::zeros({b, o});
  const T* xp = x.data().data();
  const T* wp = w.data().data();
  T* op_ = out.data().data();
  for (std::size_t r = 0; r < b; ++r)
    for (std::size_t k = 0; k < inner; ++k) {
      const T xv = xp[r * inner + k];
      const T* wrow = wp + k * o;
      T* orow = op_ + r * o;
      for (std::size_t c = 0; c < o; ++c) orow[c] += xv * wrow[c];
    }
  if (tracking<T>({&x, &w})) {
    out.set_needs_grad(true);
    TapeT<T>::current()->record([xs = x.storage(), ws = w.storage(), os = out.storage(), b, inner,
                                 o]() {
      if (os->grad.empty()) return;
      const T* g = os->grad.data();
      if (xs->needs_grad) {
        ensure_grad(xs);
        for (std::size_t r = 0; r < b; ++r)
          for (std::size_t k = 0; k < inner; ++k) {
            T acc = 0;
            const T* wrow = ws->data.data() + k * o;
            const T* grow = g + r * o;
            for (std::size_t c = 0; c < o; ++c) acc += grow[c] * wrow[c];
            xs->grad[r * inner + k] += acc;
          }
      }
      if (ws->needs_grad) {
        ensure_grad(ws);
        for (std::size_t r = 0; r < b; ++r)
          for (std::size_t k = 0; k < inner; ++k) {
            const T xv = xs->data[r * inner + k];
            const T* grow = g + r * o;
            T* gwrow = ws->grad.data() + k * o;
            for (std::size_t c = 0; c < o; ++c) gwrow[c] += xv * grow[c];
          }
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> add_row_bias(const TensorT<T>& x, const TensorT<T>& bias) {
  check_defined(x, "add_row_bias");
  check_defined(bias, "add_row_bias");
  if (x.rank() != 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1))
    throw DimensionError("add_row_bias: incompatible shapes " + shape_str(x.shape()) + " vs " +
                         shape_str(bias.shape()));
  const std::size_t b = x.dim(0), k = x.dim(1);
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  const T* xp = x.data().data();
  const T* bp = bias.data().data();
  T* op_ = out.data().data();
  for (std::size_t r = 0; r < b; ++r)
    for (std::size_t c = 0; c < k; ++c) op_[r * k + c] = xp[r * k + c] + bp[c];
  if (tracking<T>({&x, &bias})) {
    out.set_needs_grad(true);
    TapeT<T>::current()->record([xs = x.storage(), bs = bias.storage(), os = out.storage(), b,
                                 k]() {
      if (os->grad.empty()) return;
      if (xs->needs_grad) {
        ensure_grad(xs);
        for (std::size_t i = 0; i < b * k; ++i) xs->grad[i] += os->grad[i];
      }
      if (bs->needs_grad) {
        ensure_grad(bs);
        for (std::size_t r = 0; r < b; ++r)
          for (std::size_t c = 0; c < k; ++c) bs->grad[c] += os->grad[r * k + c];
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias) {
  return add_row_bias(matmul(x, w), bias);
}

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& k, int stride, int pad) {
  check_defined(x, "conv2d");
  check_defined(k, "conv2d");
  if (x.rank() != 4 || k.rank() != 4)
    throw DimensionError("conv2d: expected 4-d input and kernel, got " + shape_str(x.shape()) +
                         " and " + shape_str(k.shape()));
  if (x.dim(1) != k.dim(1))
    throw DimensionError("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " +
                         shape_str(k.shape()));
  if (stride < 1) throw DimensionError("conv2d: stride must be >= 1");
  if (pad < 0) throw DimensionError("conv2d: pad must be >= 0");
  const long b = static_cast<long>(x.dim(0)), ci = static_cast<long>(x.dim(1));
  const long h = static_cast<long>(x.dim(2)), w = static_cast<long>(x.dim(3));
  const long co = static_cast<long>(k.dim(0));
  const long kh = static_cast<long>(k.dim(2)), kw = static_cast<long>(k.dim(3));
  const long ho = (h + 2 * pad - kh) / stride + 1;
  const long wo = (w + 2 * pad - kw) / stride + 1;
  if (h + 2 * pad < kh || w + 2 * pad < kw || ho <= 0 || wo <= 0)
    throw DimensionError("conv2d: non-positive output dims for input " + shape_str(x.shape()) +
                         " kernel " + shape_str(k.shape()) + " stride " + std::to_string(stride) +
                         " pad " + std::to_string(pad));
  TensorT<T> out = TensorT<T>::zeros({static_cast<std::size_t>(b), static_cast<std::size_t>(co),
                                      static_cast<std::size_t>(ho), static_cast<std::size_t>(wo)});
  const T* xp = x.data().data();
  const T* kp = k.data().data();
  T* op_ = out.data().data();
  const long s = stride, p = pad;
  for (long ib = 0; ib < b; ++ib)
    for (long oc = 0; oc < co; ++oc) {
      T* oplane = op_ + (ib * co + oc) * ho * wo;
      for (long ic = 0; ic < ci; ++ic) {
        const T* xplane = xp + (ib * ci + ic) * h * w;
        const T* kplane = kp + (oc * ci + ic) * kh * kw;
        for (long ky = 0; ky < kh; ++ky)
          for (long kx = 0; kx < kw; ++kx) {
            const T kv = kplane[ky * kw + kx];
            if (kv == T(0)) continue;
            for (long oy = 0; oy < ho; ++oy) {
              const long iy = oy * s - p + ky;
              if (iy < 0 || iy >= h) continue;
              const T* xrow = xplane + iy * w;
              T* orow = oplane + oy * wo;
              for (long ox = 0; ox < wo; ++ox) {
                const long ix = ox * s - p + kx;
                if (ix < 0 || ix >= w) continue;
                orow[ox] += kv * xrow[ix];
              }
            }
          }
      }
    }
  if (tracking<T>({&x, &k})) {
    out.set_needs_grad(true);
    TapeT<T>::current()->record([xs = x.storage(), ks = k.storage(), os = out.storage(), b, ci, h,
                                 w, co, kh, kw, ho, wo, s, p]() {
      if (os->grad.empty()) return;
      const T* g = os->grad.data();
      const bool gx = xs->needs_grad, gk = ks->needs_grad;
      if (gx) ensure_grad(xs);
      if (gk) ensure_grad(ks);
      if (!gx && !gk) return;
      for (long ib = 0; ib < b; ++ib)
        for (long oc = 0; oc < co; ++oc) {
          const T* gplane = g + (ib * co + oc) * ho * wo;
          for (long ic = 0; ic < ci; ++ic) {
            const T* xplane = xs->data.data() + (ib * ci + ic) * h * w;
            const T* kplane = ks->data.data() + (oc * ci + ic) * kh * kw;
            T* gxplane = gx ? xs->grad.data() + (ib * ci + ic) * h * w : nullptr;
            T* gkplane = gk ? ks->grad.data() + (oc * ci + ic) * kh * kw : nullptr;
            for (long ky = 0; ky < kh; ++ky)
              for (long kx = 0; kx < kw; ++kx) {
                const T kv = kplane[ky * kw + kx];
                T kacc = 0;
                for (long oy = 0; oy < ho; ++oy) {
                  const long iy = oy * s - p + ky;
                  if (iy < 0 || iy >= h) continue;
                  const T* grow = gplane + oy * wo;
                  const T* xrow = xplane + iy * w;
                  T* gxrow = gx ? gxplane + iy * w : nullptr;
                  for (long ox = 0; ox < wo; ++ox) {
                    const long ix = ox * s - p + kx;
                    if (ix < 0 || ix >= w) continue;
                    const T gv = grow[ox];
                    if (gx) gxrow[ix] += kv * gv;
                    if (gk) kacc += xrow[ix] * gv;
                  }
                }
                if (gk) gkplane[ky * kw + kx] += kacc;
              }
          }
        }
    });
  }
  return out;
}

template <typename T>
TensorT<T> add_channel_bias(const TensorT<T>& x, const TensorT<T>& bias) {
  check_defined(x, "add_channel_bias");
  check_defined(bias, "add_channel_bias");
  if (x.rank() != 4 || bias.rank() != 1 || bias.dim(0) != x.dim(1))
    throw DimensionError("add_channel_bias: incompatible shapes " + shape_str(x.shape()) + " vs " +
                         shape_str(bias.shape()));
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  const T* xp = x.data().data();
  const T* bp = bias.data().data();
  T* op_ = out.data().data();
  for (std::size_t ib = 0; ib < b; ++ib)
    for (std::size_t ic = 0; ic < c; ++ic) {
      const T bv = bp[ic];
      const std::size_t base = (ib * c + ic) * hw;
      for (std::size_t i = 0; i < hw; ++i) op_[base + i] = xp[base + i] + bv;
    }
  if (tracking<T>({&x, &bias})) {
    out.set_needs_grad(true);
    TapeT<T>::current()->record(
        [xs = x.storage(), bs = bias.storage(), os = out.storage(), b, c, hw]() {
          if (os->grad.empty()) return;
          if (xs->needs_grad) {
            ensure_grad(xs);
            for (std::size_t i = 0; i < os->grad.size(); ++i) xs->grad[i] += os->grad[i];
          }
          if (bs->needs_grad) {
            ensure_grad(bs);
            for (std::size_t ib = 0; ib < b; ++ib)
              for (std::size_t ic = 0; ic < c; ++ic) {
                const std::size_t base = (ib * c + ic) * hw;
                T acc = 0;
                for (std::size_t i = 0; i < hw; ++i) acc += os->grad[base + i];
                bs->grad[ic] += acc;
              }
          }
        });
  }
  return out;
}

template <typename T>
TensorT<T> relu(const TensorT<T>& x) {
  return unary_op(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); },
      [](T xv, T) { return xv > T(0) ? T(1) : T(0); });
}

template <typename T>
TensorT<T> sigmoid(const TensorT<T>& x) {
  return unary_op(
      "sigmoid", x,
      [](T v) {
        if (v >= T(0)) {
          const T e = std::exp(-v);
          return T(1) / (T(1) + e);
        }
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T yv) { return yv * (T(1) - yv); });
}

template <typename T>
TensorT<T> exp(const TensorT<T>& x) {
  TensorT<T> out = unary_op(
      "exp", x, [](T v) { return std::exp(v); }, [](T, T yv) { return yv; });
  for (T v : out.data())
    if (!std::isfinite(v)) throw DomainError("exp: overflow to non-finite value");
  return out;
}

template <typename T>
TensorT<T> log(const TensorT<T>& x) {
  for (T v : x.data())
    if (!(v > T(0))) throw DomainError("log: non-positive input " + std::to_string(v));
  return unary_op(
      "log", x, [](T v) { return std::log(v); }, [](T xv, T) { return T(1) / xv; });
}

template <typename T>
TensorT<T> square(const TensorT<T>& x) {
  return unary_op(
      "square", x, [](T v) { return v * v; }, [](T xv, T) { return T(2) * xv; });
}

template <typename T>
TensorT<T> sqrt(const TensorT<T>& x) {
  for (T v : x.data())
    if (v < T(0)) throw DomainError("sqrt: negative input " + std::to_string(v));
  // Subgradient 0 at the origin so norms of identical vectors stay finite.
  return unary_op(
      "sqrt", x, [](T v) { return std::sqrt(v); },
      [](T, T yv) { return yv > T(0) ? T(1) / (T(2) * yv) : T(0); });
}

template <typename T>
TensorT<T> neg(const TensorT<T>& x) {
  return unary_op(
      "neg", x, [](T v) { return -v; }, [](T, T) { return T(-1); });
}

template <typename T>
TensorT<T> clamp(const TensorT<T>& x, T lo, T hi) {
  if (!(lo <= hi)) throw UsageError("clamp: lo > hi");
  return unary_op(
      "clamp", x, [lo, hi](T v) { return std::min(std::max(v, lo), hi); },
      [lo, hi](T xv, T) { return (xv > lo && xv < hi) ? T(1) : T(0); });
}

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  return binary_op(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  return binary_op(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  return binary_op(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <typename T>
TensorT<T> add_scalar(const TensorT<T>& x, T c) {
  return unary_op(
      "add_scalar", x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <typename T>
TensorT<T> mul_scalar(const TensorT<T>& x, T c) {
  return unary_op(
      "mul_scalar", x, [c](T v) { return v * c; }, [c](T, T) { return c; });
}

template <typename T>
TensorT<T> sub_from(T c, const TensorT<T>& x) {
  return unary_op(
      "sub_from", x, [c](T v) { return c - v; }, [](T, T) { return T(-1); });
}

template <typename T>
TensorT<T> batchnorm2d(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                       BatchNormStateT<T>& state, bool train) {
  check_defined(x, "batchnorm2d");
  if (x.rank() != 4) throw DimensionError("batchnorm2d: expected 4-d input, got " + shape_str(x.shape()));
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gamma.rank() != 1 || gamma.dim(0) != c || beta.rank() != 1 || beta.dim(0) != c)
    throw DimensionError("batchnorm2d: gamma/beta must have shape [" + std::to_string(c) + "]");
  const std::size_t n_per_c = b * hw;
  const T eps = static_cast<T>(1e-5);
  const T momentum = static_cast<T>(0.1);

  TensorT<T> out = TensorT<T>::zeros(x.shape());
  const T* xp = x.data().data();
  T* op_ = out.data().data();
  const T* gp = gamma.data().data();
  const T* bp = beta.data().data();

  if (train) {
    if (n_per_c < 2) throw UsageError("batchnorm2d: train mode needs at least 2 values per channel");
    if (state.running_mean.size() != c) {
      state.running_mean.assign(c, T(0));
      state.running_var.assign(c, T(1));
    }
    std::vector<T> xhat(x.numel());
    std::vector<T> inv_std(c);
    for (std::size_t ic = 0; ic < c; ++ic) {
      T mean = 0;
      for (std::size_t ib = 0; ib < b; ++ib) {
        const std::size_t base = (ib * c + ic) * hw;
        for (std::size_t i = 0; i < hw; ++i) mean += xp[base + i];
      }
      mean /= static_cast<T>(n_per_c);
      T var = 0;
      for (std::size_t ib = 0; ib < b; ++ib) {
        const std::size_t base = (ib * c + ic) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const T d = xp[base + i] - mean;
          var += d * d;
        }
      }
      var /= static_cast<T>(n_per_c);
      const T istd = T(1) / std::sqrt(var + eps);
      inv_std[ic] = istd;
      for (std::size_t ib = 0; ib < b; ++ib) {
        const std::size_t base = (ib * c + ic) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const T xh = (xp[base + i] - mean) * istd;
          xhat[base + i] = xh;
          op_[base + i] = gp[ic] * xh + bp[ic];
        }
      }
      const T unbiased = var * static_cast<T>(n_per_c) / static_cast<T>(n_per_c - 1);
      state.running_mean[ic] = (T(1) - momentum) * state.running_mean[ic] + momentum * mean;
      state.running_var[ic] = (T(1) - momentum) * state.running_var[ic] + momentum * unbiased;
    }
    state.initialized = true;
    if (tracking<T>({&x, &gamma, &beta})) {
      out.set_needs_grad(true);
      TapeT<T>::current()->record([xs = x.storage(), gs = gamma.storage(), bs = beta.storage(),
                                   os = out.storage(), xhat = std::move(xhat),
                                   inv_std = std::move(inv_std), b, c, hw, n_per_c]() {
        if (os->grad.empty()) return;
        const T* gy = os->grad.data();
        for (std::size_t ic = 0; ic < c; ++ic) {
          T sum_gy = 0, sum_gy_xhat = 0;
          for (std::size_t ib = 0; ib < b; ++ib) {
            const std::size_t base = (ib * c + ic) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
              sum_gy += gy[base + i];
              sum_gy_xhat += gy[base + i] * xhat[base + i];
            }
          }
          if (gs->needs_grad) {
            ensure_grad(gs);
            gs->grad[ic] += sum_gy_xhat;
          }
          if (bs->needs_grad) {
            ensure_grad(bs);
            bs->grad[ic] += sum_gy;
          }
          if (xs->needs_grad) {
            ensure_grad(xs);
            const T gval = gs->data[ic];
            const T mean_gy = sum_gy / static_cast<T>(n_per_c);
            const T mean_gy_xhat = sum_gy_xhat / static_cast<T>(n_per_c);
            const T scale = gval * inv_std[ic];
            for (std::size_t ib = 0; ib < b; ++ib) {
              const std::size_t base = (ib * c + ic) * hw;
              for (std::size_t i = 0; i < hw; ++i)
                xs->grad[base + i] +=
                    scale * (gy[base + i] - mean_gy - xhat[base + i] * mean_gy_xhat);
            }
          }
        }
      });
    }
    return out;
  }

  // eval mode
  if (!state.initialized)
    throw StateError("batchnorm2d: eval before any train step (running stats uninitialized)");
  if (state.running_mean.size() != c)
    throw DimensionError("batchnorm2d: running stats track " +
                         std::to_string(state.running_mean.size()) + " channels, input has " +
                         std::to_string(c));
  std::vector<T> inv_std(c);
  for (std::size_t ic = 0; ic < c; ++ic) inv_std[ic] = T(1) / std::sqrt(state.running_var[ic] + eps);
  for (std::size_t ib = 0; ib < b; ++ib)
    for (std::size_t ic = 0; ic < c; ++ic) {
      const std::size_t base = (ib * c + ic) * hw;
      const T m = state.running_mean[ic], istd = inv_std[ic];
      for (std::size_t i = 0; i < hw; ++i)
        op_[base + i] = gp[ic] * (xp[base + i] - m) * istd + bp[ic];
    }
  if (tracking<T>({&x, &gamma, &beta})) {
    out.set_needs_grad(true);
    TapeT<T>::current()->record([xs = x.storage(), gs = gamma.storage(), bs = beta.storage(),
                                 os = out.storage(), rm = state.running_mean,
                                 inv_std = std::move(inv_std), b, c, hw]() {
      if (os->grad.empty()) return;
      const T* gy = os->grad.data();
      for (std::size_t ic = 0; ic < c; ++ic) {
        const T istd = inv_std[ic];
        T sum_gy = 0, sum_gy_xhat = 0;
        for (std::size_t ib = 0; ib < b; ++ib) {
          const std::size_t base = (ib * c + ic) * hw;
          for (std::size_t i = 0; i < hw; ++i) {
            sum_gy += gy[base + i];
            sum_gy_xhat += gy[base + i] * (xs->data[base + i] - rm[ic]) * istd;
          }
        }
        if (gs->needs_grad) {
          ensure_grad(gs);
          gs->grad[ic] += sum_gy_xhat;
        }
        if (bs->needs_grad) {
          ensure_grad(bs);
          bs->grad[ic] += sum_gy;
        }
        if (xs->needs_grad) {
          ensure_grad(xs);
          const T scale = gs->data[ic] * istd;
          for (std::size_t ib = 0; ib < b; ++ib) {
            const std::size_t base = (ib * c + ic) * hw;
            for (std::size_t i = 0; i < hw; ++i) xs->grad[base + i] += scale * gy[base + i];
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> softmax(const TensorT<T>& x) {
  check_defined(x, "softmax");
  if (x.rank() != 2 || x.dim(1) < 1)
    throw DimensionError("softmax: expected [b,k] with k >= 1, got " + shape_str(x.shape()));
  const std::size_t b = x.dim(0), k = x.dim(1);
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  const T* xp = x.data().data();
  T* op_ = out.data().data();
  for (std::size_t r = 0; r < b; ++r) {
    const T* row = xp + r * k;
    T* orow = op_ + r * k;
    T mx = row[0];
    for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, row[c]);
    T sum = 0;
    for (std::size_t c = 0; c < k; ++c) {
      orow[c] = std::exp(row[c] - mx);
      sum += orow[c];
    }
    for (std::size_t c = 0; c < k; ++c) orow[c] /= sum;
  }
  if (tracking<T>({&x})) {
    out.set_needs_grad(true);
    TapeT<T>::current()->record([xs = x.storage(), os = out.storage(), b, k]() {
      if (os->grad.empty() || !xs->needs_grad) return;
      ensure_grad(xs);
      for (std::size_t r = 0; r < b; ++r) {
        const T* y = os->data.data() + r * k;
        const T* gy = os->grad.data() + r * k;
        T dot = 0;
        for (std::size_t c = 0; c < k; ++c) dot += y[c] * gy[c];
        T* gx = xs->grad.data() + r * k;
        for (std::size_t c = 0; c < k; ++c) gx[c] += y[c] * (gy[c] - dot);
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> spatial_transform(const TensorT<T>& f, const TensorT<T>& phi) {
  check_defined(f, "spatial_transform");
  check_defined(phi, "spatial_transform");
  if (f.rank() != 4 || phi.rank() != 4 || phi.dim(1) != 2 || phi.dim(0) != f.dim(0) ||
      phi.dim(2) != f.dim(2) || phi.dim(3) != f.dim(3))
    throw DimensionError("spatial_transform: field " + shape_str(phi.shape()) +
                         " incompatible with features " + shape_str(f.shape()));
  const long b = static_cast<long>(f.dim(0)), c = static_cast<long>(f.dim(1));
  const long h = static_cast<long>(f.dim(2)), w = static_cast<long>(f.dim(3));
  TensorT<T> out = TensorT<T>::zeros(f.shape());
  const T* fp = f.data().data();
  const T* pp = phi.data().data();
  T* op_ = out.data().data();
  for (long ib = 0; ib < b; ++ib) {
    const T* dy = pp + (ib * 2 + 0) * h * w;
    const T* dx = pp + (ib * 2 + 1) * h * w;
    for (long y = 0; y < h; ++y)
      for (long x = 0; x < w; ++x) {
        const long pix = y * w + x;
        T py = static_cast<T>(y) + dy[pix];
        T px = static_cast<T>(x) + dx[pix];
        py = std::min(std::max(py, T(0)), static_cast<T>(h - 1));
        px = std::min(std::max(px, T(0)), static_cast<T>(w - 1));
        const long y0 = static_cast<long>(std::floor(py));
        const long x0 = static_cast<long>(std::floor(px));
        const long y1 = std::min(y0 + 1, h - 1);
        const long x1 = std::min(x0 + 1, w - 1);
        const T wy = py - static_cast<T>(y0);
        const T wx = px - static_cast<T>(x0);
        for (long ic = 0; ic < c; ++ic) {
          const T* plane = fp + (ib * c + ic) * h * w;
          T v;
          if (wy == T(0) && wx == T(0)) {
            v = plane[y0 * w + x0];  // exact copy keeps the zero field bitwise identity
          } else {
            v = (T(1) - wy) * ((T(1) - wx) * plane[y0 * w + x0] + wx * plane[y0 * w + x1]) +
                wy * ((T(1) - wx) * plane[y1 * w + x0] + wx * plane[y1 * w + x1]);
          }
          op_[(ib * c + ic) * h * w + pix] = v;
        }
      }
  }
  if (tracking<T>({&f, &phi})) {
    out.set_needs_grad(true);
    TapeT<T>::current()->record([fs = f.storage(), ps = phi.storage(), os = out.storage(), b, c, h,
                                 w]() {
      if (os->grad.empty()) return;
      const bool gf = fs->needs_grad, gphi = ps->needs_grad;
      if (gf) ensure_grad(fs);
      if (gphi) ensure_grad(ps);
      if (!gf && !gphi) return;
      for (long ib = 0; ib < b; ++ib) {
        const T* dy = ps->data.data() + (ib * 2 + 0) * h * w;
        const T* dx = ps->data.data() + (ib * 2 + 1) * h * w;
        T* gdy = gphi ? ps->grad.data() + (ib * 2 + 0) * h * w : nullptr;
        T* gdx = gphi ? ps->grad.data() + (ib * 2 + 1) * h * w : nullptr;
        for (long y = 0; y < h; ++y)
          for (long x = 0; x < w; ++x) {
            const long pix = y * w + x;
            const T py_raw = static_cast<T>(y) + dy[pix];
            const T px_raw = static_cast<T>(x) + dx[pix];
            const bool y_in = py_raw > T(0) && py_raw < static_cast<T>(h - 1);
            const bool x_in = px_raw > T(0) && px_raw < static_cast<T>(w - 1);
            const T py = std::min(std::max(py_raw, T(0)), static_cast<T>(h - 1));
            const T px = std::min(std::max(px_raw, T(0)), static_cast<T>(w - 1));
            const long y0 = static_cast<long>(std::floor(py));
            const long x0 = static_cast<long>(std::floor(px));
            const long y1 = std::min(y0 + 1, h - 1);
            const long x1 = std::min(x0 + 1, w - 1);
            const T wy = py - static_cast<T>(y0);
            const T wx = px - static_cast<T>(x0);
            T acc_dpy = 0, acc_dpx = 0;
            for (long ic = 0; ic < c; ++ic) {
              const std::size_t plane = (ib * c + ic) * h * w;
              const T gv = os->grad[plane + pix];
              if (gv == T(0)) continue;
              const T* fplane = fs->data.data() + plane;
              if (gf) {
                T* gfp = fs->grad.data() + plane;
                gfp[y0 * w + x0] += gv * (T(1) - wy) * (T(1) - wx);
                gfp[y0 * w + x1] += gv * (T(1) - wy) * wx;
                gfp[y1 * w + x0] += gv * wy * (T(1) - wx);
                gfp[y1 * w + x1] += gv * wy * wx;
              }
              if (gphi) {
                const T f00 = fplane[y0 * w + x0], f01 = fplane[y0 * w + x1];
                const T f10 = fplane[y1 * w + x0], f11 = fplane[y1 * w + x1];
                acc_dpy += gv * ((T(1) - wx) * (f10 - f00) + wx * (f11 - f01));
                acc_dpx += gv * ((T(1) - wy) * (f01 - f00) + wy * (f11 - f10));
              }
            }
            if (gphi) {
              if (y_in) gdy[pix] += acc_dpy;
              if (x_in) gdx[pix] += acc_dpx;
            }
          }
      }
    });
  }
  return out;
}

template <typename T>
AttnPoolT<T> attention_softmax_pool(const TensorT<T>& f, const TensorT<T>& score_w) {
  check_defined(f, "attention_softmax_pool");
  check_defined(score_w, "attention_softmax_pool");
  if (f.rank() != 4 || score_w.rank() != 1 || score_w.dim(0) != f.dim(1))
    throw DimensionError("attention_softmax_pool: features " + shape_str(f.shape()) +
                         " vs scores " + shape_str(score_w.shape()));
  const std::size_t b = f.dim(0), c = f.dim(1), h = f.dim(2), w = f.dim(3), hw = h * w;
  if (hw < 1) throw DimensionError("attention_softmax_pool: empty grid");
  AttnPoolT<T> out;
  out.a = TensorT<T>::zeros({b, h, w});
  out.v = TensorT<T>::zeros({b, c});
  const T* fp = f.data().data();
  const T* wp = score_w.data().data();
  T* ap = out.a.data().data();
  T* vp = out.v.data().data();
  for (std::size_t ib = 0; ib < b; ++ib) {
    T* arow = ap + ib * hw;
    // scores
    for (std::size_t i = 0; i < hw; ++i) {
      T s = 0;
      for (std::size_t ic = 0; ic < c; ++ic) s += wp[ic] * fp[(ib * c + ic) * hw + i];
      arow[i] = s;
    }
    // softmax over the grid
    T mx = arow[0];
    for (std::size_t i = 1; i < hw; ++i) mx = std::max(mx, arow[i]);
    T sum = 0;
    for (std::size_t i = 0; i < hw; ++i) {
      arow[i] = std::exp(arow[i] - mx);
      sum += arow[i];
    }
    for (std::size_t i = 0; i < hw; ++i) arow[i] /= sum;
    // weighted pooling
    for (std::size_t ic = 0; ic < c; ++ic) {
      const T* plane = fp + (ib * c + ic) * hw;
      T acc = 0;
      for (std::size_t i = 0; i < hw; ++i) acc += arow[i] * plane[i];
      vp[ib * c + ic] = acc;
    }
  }
  if (tracking<T>({&f, &score_w})) {
    out.a.set_needs_grad(true);
    out.v.set_needs_grad(true);
    TapeT<T>::current()->record([fs = f.storage(), ws = score_w.storage(), as = out.a.storage(),
                                 vs = out.v.storage(), b, c, hw]() {
      const bool have_ga = !as->grad.empty();
      const bool have_gv = !vs->grad.empty();
      if (!have_ga && !have_gv) return;
      const bool gf = fs->needs_grad, gw = ws->needs_grad;
      if (gf) ensure_grad(fs);
      if (gw) ensure_grad(ws);
      if (!gf && !gw) return;
      std::vector<T> da(hw), gs_(hw);
      for (std::size_t ib = 0; ib < b; ++ib) {
        const T* arow = as->data.data() + ib * hw;
        // total gradient reaching the attention map: direct + through v
        for (std::size_t i = 0; i < hw; ++i) da[i] = have_ga ? as->grad[ib * hw + i] : T(0);
        if (have_gv) {
          for (std::size_t ic = 0; ic < c; ++ic) {
            const T gv = vs->grad[ib * c + ic];
            if (gv == T(0)) continue;
            const T* plane = fs->data.data() + (ib * c + ic) * hw;
            for (std::size_t i = 0; i < hw; ++i) da[i] += gv * plane[i];
          }
        }
        // softmax backward to the raw scores
        T dot = 0;
        for (std::size_t i = 0; i < hw; ++i) dot += arow[i] * da[i];
        for (std::size_t i = 0; i < hw; ++i) gs_[i] = arow[i] * (da[i] - dot);
        // scores = w . f, pooling v = sum a * f
        for (std::size_t ic = 0; ic < c; ++ic) {
          const T* plane = fs->data.data() + (ib * c + ic) * hw;
          const T wv = ws->data[ic];
          const T gv = have_gv ? vs->grad[ib * c + ic] : T(0);
          if (gf) {
            T* gplane = fs->grad.data() + (ib * c + ic) * hw;
            for (std::size_t i = 0; i < hw; ++i) gplane[i] += gs_[i] * wv + gv * arow[i];
          }
          if (gw) {
            T acc = 0;
            for (std::size_t i = 0; i < hw; ++i) acc += gs_[i] * plane[i];
            ws->grad[ic] += acc;
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> sum_all(const TensorT<T>& x) {
  check_defined(x, "sum_all");
  T acc = 0;
  for (T v : x.data()) acc += v;
  TensorT<T> out = TensorT<T>::scalar(acc);
  if (tracking<T>({&x})) {
    out.set_needs_grad(true);
    TapeT<T>::current()->record([xs = x.storage(), os = out.storage()]() {
      if (os->grad.empty() || !xs->needs_grad) return;
      ensure_grad(xs);
      const T g = os->grad[0];
      for (auto& gv : xs->grad) gv += g;
    });
  }
  return out;
}

template <typename T>
TensorT<T> mean_all(const TensorT<T>& x) {
  check_defined(x, "mean_all");
  const T scale = T(1) / static_cast<T>(x.numel());
  T acc = 0;
  for (T v : x.data()) acc += v;
  TensorT<T> out = TensorT<T>::scalar(acc * scale);
  if (tracking<T>({&x})) {
    out.set_needs_grad(true);
    TapeT<T>::current()->record([xs = x.storage(), os = out.storage(), scale]() {
      if (os->grad.empty() || !xs->needs_grad) return;
      ensure_grad(xs);
      const T g = os->grad[0] * scale;
      for (auto& gv : xs->grad) gv += g;
    });
  }
  return out;
}

template <typename T>
TensorT<T> reshape(const TensorT<T>& x, Shape shape) {
  check_defined(x, "reshape");
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape) +
                         " changes element count");
  TensorT<T> out = TensorT<T>::from_data(std::move(shape),
                                         std::vector<T>(x.data().begin(), x.data().end()));
  if (tracking<T>({&x})) {
    out.set_needs_grad(true);
    TapeT<T>::current()->record([xs = x.storage(), os = out.storage()]() {
      if (os->grad.empty() || !xs->needs_grad) return;
      ensure_grad(xs);
      for (std::size_t i = 0; i < xs->grad.size(); ++i) xs->grad[i] += os->grad[i];
    });
  }
  return out;
}

template <typename T>
TensorT<T> concat_cols(const std::vector<TensorT<T>>& parts) {
  if (parts.empty()) throw UsageError("concat_cols: no inputs");
  const std::size_t b = parts[0].dim(0);
  std::size_t total = 0;
  for (const auto& p : parts) {
    check_defined(p, "concat_cols");
    if (p.rank() != 2 || p.dim(0) != b)
      throw DimensionError("concat_cols: expected [b,k] blocks with matching rows, got " +
                           shape_str(p.shape()));
    total += p.dim(1);
  }
  TensorT<T> out = TensorT<T>::zeros({b, total});
  T* op_ = out.data().data();
  std::size_t col = 0;
  for (const auto& p : parts) {
    const std::size_t k = p.dim(1);
    const T* pp = p.data().data();
    for (std::size_t r = 0; r < b; ++r)
      std::memcpy(op_ + r * total + col, pp + r * k, k * sizeof(T));
    col += k;
  }
  bool track = false;
  if (TapeT<T>::current())
    for (const auto& p : parts)
      if (p.needs_grad()) track = true;
  if (track) {
    out.set_needs_grad(true);
    std::vector<std::shared_ptr<StorageT<T>>> stores;
    stores.reserve(parts.size());
    for (const auto& p : parts) stores.push_back(p.storage());
    TapeT<T>::current()->record([stores = std::move(stores), os = out.storage(), b, total]() {
      if (os->grad.empty()) return;
      std::size_t col = 0;
      for (const auto& s : stores) {
        const std::size_t k = s->data.size() / b;
        if (s->needs_grad) {
          ensure_grad(s);
          for (std::size_t r = 0; r < b; ++r)
            for (std::size_t c = 0; c < k; ++c) s->grad[r * k + c] += os->grad[r * total + col + c];
        }
        col += k;
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> slice_row(const TensorT<T>& x, std::size_t r) {
  check_defined(x, "slice_row");
  if (x.rank() != 2 || r >= x.dim(0))
    throw DimensionError("slice_row: row " + std::to_string(r) + " out of " + shape_str(x.shape()));
  const std::size_t k = x.dim(1);
  TensorT<T> out = TensorT<T>::from_data(
      {1, k}, std::vector<T>(x.data().begin() + r * k, x.data().begin() + (r + 1) * k));
  if (tracking<T>({&x})) {
    out.set_needs_grad(true);
    TapeT<T>::current()->record([xs = x.storage(), os = out.storage(), r, k]() {
      if (os->grad.empty() || !xs->needs_grad) return;
      ensure_grad(xs);
      for (std::size_t c = 0; c < k; ++c) xs->grad[r * k + c] += os->grad[c];
    });
  }
  return out;
}

template <typename T>
TensorT<T> expand_cols(const TensorT<T>& x, std::size_t k) {
  check_defined(x, "expand_cols");
  if (x.rank() != 2 || x.dim(1) != 1)
    throw DimensionError("expand_cols: expected [b,1], got " + shape_str(x.shape()));
  const std::size_t b = x.dim(0);
  TensorT<T> out = TensorT<T>::zeros({b, k});
  for (std::size_t r = 0; r < b; ++r)
    for (std::size_t c = 0; c < k; ++c) out.at(r * k + c) = x.at(r);
  if (tracking<T>({&x})) {
    out.set_needs_grad(true);
    TapeT<T>::current()->record([xs = x.storage(), os = out.storage(), b, k]() {
      if (os->grad.empty() || !xs->needs_grad) return;
      ensure_grad(xs);
      for (std::size_t r = 0; r < b; ++r) {
        T acc = 0;
        for (std::size_t c = 0; c < k; ++c) acc += os->grad[r * k + c];
        xs->grad[r] += acc;
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> stack_pair(const TensorT<T>& a, const TensorT<T>& b) {
  check_defined(a, "stack_pair");
  check_defined(b, "stack_pair");
  if (a.rank() != 3 || a.shape() != b.shape())
    throw DimensionError("stack_pair: expected matching [b,h,w] maps, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  const std::size_t bs = a.dim(0), hw = a.dim(1) * a.dim(2);
  TensorT<T> out = TensorT<T>::zeros({bs, 2, a.dim(1), a.dim(2)});
  T* op_ = out.data().data();
  const T* ap = a.data().data();
  const T* bp = b.data().data();
  for (std::size_t ib = 0; ib < bs; ++ib) {
    std::memcpy(op_ + (ib * 2 + 0) * hw, ap + ib * hw, hw * sizeof(T));
    std::memcpy(op_ + (ib * 2 + 1) * hw, bp + ib * hw, hw * sizeof(T));
  }
  if (tracking<T>({&a, &b})) {
    out.set_needs_grad(true);
    TapeT<T>::current()->record([as = a.storage(), bs_ = b.storage(), os = out.storage(), bs,
                                 hw]() {
      if (os->grad.empty()) return;
      for (std::size_t ib = 0; ib < bs; ++ib) {
        if (as->needs_grad) {
          ensure_grad(as);
          for (std::size_t i = 0; i < hw; ++i)
            as->grad[ib * hw + i] += os->grad[(ib * 2 + 0) * hw + i];
        }
        if (bs_->needs_grad) {
          ensure_grad(bs_);
          for (std::size_t i = 0; i < hw; ++i)
            bs_->grad[ib * hw + i] += os->grad[(ib * 2 + 1) * hw + i];
        }
      }
    });
  }
  return out;
}

#define ORDALIGN_INSTANTIATE(T)                                                                  \
  template TensorT<T> matmul<T>(const TensorT<T>&, const TensorT<T>&);                           \
  template TensorT<T> add_row_bias<T>(const TensorT<T>&, const TensorT<T>&);                     \
  template TensorT<T> linear<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&);        \
  template TensorT<T> conv2d<T>(const TensorT<T>&, const TensorT<T>&, int, int);                 \
  template TensorT<T> add_channel_bias<T>(const TensorT<T>&, const TensorT<T>&);                 \
  template TensorT<T> relu<T>(const TensorT<T>&);                                                \
  template TensorT<T> sigmoid<T>(const TensorT<T>&);                                             \
  template TensorT<T> exp<T>(const TensorT<T>&);                                                 \
  template TensorT<T> log<T>(const TensorT<T>&);                                                 \
  template TensorT<T> square<T>(const TensorT<T>&);                                              \
  template TensorT<T> sqrt<T>(const TensorT<T>&);                                                \
  template TensorT<T> neg<T>(const TensorT<T>&);                                                 \
  template TensorT<T> clamp<T>(const TensorT<T>&, T, T);                                         \
  template TensorT<T> add<T>(const TensorT<T>&, const TensorT<T>&);                              \
  template TensorT<T> sub<T>(const TensorT<T>&, const TensorT<T>&);                              \
  template TensorT<T> mul<T>(const TensorT<T>&, const TensorT<T>&);                              \
  template TensorT<T> add_scalar<T>(const TensorT<T>&, T);                                       \
  template TensorT<T> mul_scalar<T>(const TensorT<T>&, T);                                       \
  template TensorT<T> sub_from<T>(T, const TensorT<T>&);                                         \
  template TensorT<T> batchnorm2d<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&,    \
                                     BatchNormStateT<T>&, bool);                                 \
  template TensorT<T> softmax<T>(const TensorT<T>&);                                             \
  template TensorT<T> spatial_transform<T>(const TensorT<T>&, const TensorT<T>&);                \
  template AttnPoolT<T> attention_softmax_pool<T>(const TensorT<T>&, const TensorT<T>&);         \
  template TensorT<T> sum_all<T>(const TensorT<T>&);                                             \
  template TensorT<T> mean_all<T>(const TensorT<T>&);                                            \
  template TensorT<T> reshape<T>(const TensorT<T>&, Shape);                                      \
  template TensorT<T> concat_cols<T>(const std::vector<TensorT<T>>&);                            \
  template TensorT<T> slice_row<T>(const TensorT<T>&, std::size_t);                              \
  template TensorT<T> expand_cols<T>(const TensorT<T>&, std::size_t);                            \
  template TensorT<T> stack_pair<T>(const TensorT<T>&, const TensorT<T>&);

ORDALIGN_INSTANTIATE(float)
ORDALIGN_INSTANTIATE(double)

#undef ORDALIGN_INSTANTIATE

}  // namespace ordalign
