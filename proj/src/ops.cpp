#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <limits>
#include <memory>
#include <numeric>

#include "dain/autodiff.hpp"
#include "gemm.hpp"

namespace dain::ad {

namespace {

using detail::gemm_nn;
using detail::gemm_nt;
using detail::gemm_tn;

std::atomic<std::size_t> g_l2_guard_hits{0};

Tape& tape_of(Var a, std::string_view op) {
  if (!a.valid()) throw std::logic_error(std::string(op) + ": unbound input");
  return *a.tape();
}

void require_same(Var a, Var b, std::string_view op) {
  if (a.tape() != b.tape()) throw std::logic_error(std::string(op) + ": inputs on different tapes");
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  if (a.dtype() != b.dtype()) throw ShapeError(std::string(op) + ": dtype mismatch");
}

void require_rank(Var a, std::size_t r, std::string_view op) {
  if (a.value().rank() != r)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + shape_str(a.shape()));
}

void require_dtype(Var a, Var b, std::string_view op) {
  if (a.dtype() != b.dtype()) throw ShapeError(std::string(op) + ": dtype mismatch");
}

/// Rows over the last axis.
std::pair<std::size_t, std::size_t> rows_cols(const Shape& s) {
  const std::size_t cols = s.back();
  return {shape_numel(s) / cols, cols};
}

std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

template <class T>
void im2col(const T* x, std::size_t C, std::size_t H, std::size_t W, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad, std::size_t Ho, std::size_t Wo, T* cols) {
  const std::size_t P = Ho * Wo;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ki = 0; ki < kh; ++ki)
      for (std::size_t kj = 0; kj < kw; ++kj) {
        T* row = cols + ((c * kh + ki) * kw + kj) * P;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ki) - static_cast<long>(pad);
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kj) - static_cast<long>(pad);
            row[oy * Wo + ox] = (iy >= 0 && iy < static_cast<long>(H) && ix >= 0 && ix < static_cast<long>(W))
                                    ? x[(c * H + iy) * W + ix]
                                    : T(0);
          }
        }
      }
}

template <class T>
void col2im(const T* cols, std::size_t C, std::size_t H, std::size_t W, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad, std::size_t Ho, std::size_t Wo, T* gx) {
  const std::size_t P = Ho * Wo;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ki = 0; ki < kh; ++ki)
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const T* row = cols + ((c * kh + ki) * kw + kj) * P;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ki) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(H)) continue;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kj) - static_cast<long>(pad);
            if (ix < 0 || ix >= static_cast<long>(W)) continue;
            gx[(c * H + iy) * W + ix] += row[oy * Wo + ox];
          }
        }
      }
}

struct Vol {
  std::size_t D, H, W;
};

/// Visits every (column row, output position, input offset) triple of a stride-1 3D convolution.
template <class F>
void for_each_vol_tap(std::size_t C, Vol in, std::size_t k0, std::size_t k1, std::size_t k2, std::size_t pad,
                      Vol out, F&& f) {
  const std::size_t P = out.D * out.H * out.W;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t a = 0; a < k0; ++a)
      for (std::size_t b = 0; b < k1; ++b)
        for (std::size_t e = 0; e < k2; ++e) {
          const std::size_t row = (((c * k0 + a) * k1 + b) * k2 + e) * P;
          for (std::size_t od = 0; od < out.D; ++od) {
            const long id = static_cast<long>(od + a) - static_cast<long>(pad);
            const bool in_d = id >= 0 && id < static_cast<long>(in.D);
            for (std::size_t oy = 0; oy < out.H; ++oy) {
              const long iy = static_cast<long>(oy + b) - static_cast<long>(pad);
              const bool in_dy = in_d && iy >= 0 && iy < static_cast<long>(in.H);
              for (std::size_t ox = 0; ox < out.W; ++ox) {
                const long ix = static_cast<long>(ox + e) - static_cast<long>(pad);
                const bool inside = in_dy && ix >= 0 && ix < static_cast<long>(in.W);
                const std::size_t p = (od * out.H + oy) * out.W + ox;
                f(row + p, inside, inside ? ((c * in.D + id) * in.H + iy) * in.W + ix : 0);
              }
            }
          }
        }
}

template <class T>
void vol2col(const T* x, std::size_t C, Vol in, std::size_t k0, std::size_t k1, std::size_t k2, std::size_t pad,
             Vol out, T* cols) {
  for_each_vol_tap(C, in, k0, k1, k2, pad, out,
                   [&](std::size_t ci, bool inside, std::size_t xi) { cols[ci] = inside ? x[xi] : T(0); });
}

template <class T>
void col2vol(const T* cols, std::size_t C, Vol in, std::size_t k0, std::size_t k1, std::size_t k2, std::size_t pad,
             Vol out, T* gx) {
  for_each_vol_tap(C, in, k0, k1, k2, pad, out, [&](std::size_t ci, bool inside, std::size_t xi) {
    if (inside) gx[xi] += cols[ci];
  });
}

template <class T>
inline T uniform01(std::mt19937_64& rng) {
  return static_cast<T>(static_cast<double>(rng() >> 11) * 0x1.0p-53);
}

}  // namespace

// ---------------------------------------------------------------------------

Var add(Var a, Var b) {
  require_same(a, b, "add");
  Tensor out = a.value();
  out.add_(b.value());
  return tape_of(a, "add").record("add", std::move(out), {a, b}, [](const Tensor& g, std::span<Tensor* const> gi) {
    if (gi[0]) gi[0]->add_(g);
    if (gi[1]) gi[1]->add_(g);
  });
}

Var sub(Var a, Var b) {
  require_same(a, b, "sub");
  Tensor out = b.value();
  out.scale_(-1.0);
  out.add_(a.value());
  return tape_of(a, "sub").record("sub", std::move(out), {a, b}, [](const Tensor& g, std::span<Tensor* const> gi) {
    if (gi[0]) gi[0]->add_(g);
    if (gi[1]) {
      Tensor ng = g;
      ng.scale_(-1.0);
      gi[1]->add_(ng);
    }
  });
}

Var mul(Var a, Var b) {
  require_same(a, b, "mul");
  Tensor out(a.shape(), a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto x = a.value().data<T>(), y = b.value().data<T>();
    auto o = out.data<T>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  });
  return tape_of(a, "mul").record("mul", std::move(out), {a, b}, [a, b](const Tensor& g, std::span<Tensor* const> gi) {
    dispatch(g.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto gv = g.data<T>();
      auto x = a.value().data<T>(), y = b.value().data<T>();
      if (gi[0]) {
        auto d = gi[0]->data<T>();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += gv[i] * y[i];
      }
      if (gi[1]) {
        auto d = gi[1]->data<T>();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += gv[i] * x[i];
      }
    });
  });
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  out.scale_(s);
  return tape_of(a, "scale").record("scale", std::move(out), {a}, [s](const Tensor& g, std::span<Tensor* const> gi) {
    Tensor sg = g;
    sg.scale_(s);
    gi[0]->add_(sg);
  });
}

Var log(Var a) {
  Tensor out(a.shape(), a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto x = a.value().data<T>();
    auto o = out.data<T>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::log(x[i]);
  });
  return tape_of(a, "log").record("log", std::move(out), {a}, [a](const Tensor& g, std::span<Tensor* const> gi) {
    dispatch(g.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto gv = g.data<T>();
      auto x = a.value().data<T>();
      auto d = gi[0]->data<T>();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += gv[i] / x[i];
    });
  });
}

Var exp(Var a) {
  Tensor out(a.shape(), a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto x = a.value().data<T>();
    auto o = out.data<T>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::exp(x[i]);
  });
  Tensor y = out;
  return tape_of(a, "exp").record("exp", std::move(out), {a}, [y = std::move(y)](const Tensor& g, std::span<Tensor* const> gi) {
    dispatch(g.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto gv = g.data<T>();
      auto yv = y.data<T>();
      auto d = gi[0]->data<T>();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += gv[i] * yv[i];
    });
  });
}

Var matmul(Var a, Var b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  require_dtype(a, b, "matmul");
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  if (b.dim(0) != K) throw ShapeError("matmul: inner extents " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor out({M, N}, a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    gemm_nn<T>(M, N, K, a.value().data<T>().data(), b.value().data<T>().data(), out.data<T>().data());
  });
  return tape_of(a, "matmul").record(
      "matmul", std::move(out), {a, b}, [a, b, M, N, K](const Tensor& g, std::span<Tensor* const> gi) {
        dispatch(g.dtype(), [&](auto tag) {
          using T = decltype(tag);
          const T* G = g.data<T>().data();
          if (gi[0]) gemm_nt<T>(M, K, N, G, b.value().data<T>().data(), gi[0]->data<T>().data());
          if (gi[1]) gemm_tn<T>(K, N, M, a.value().data<T>().data(), G, gi[1]->data<T>().data());
        });
      });
}

Var linear(Var x, Var w, Var b) {
  require_rank(x, 2, "linear");
  require_rank(w, 2, "linear");
  require_rank(b, 1, "linear");
  require_dtype(x, w, "linear");
  require_dtype(x, b, "linear");
  const std::size_t N = x.dim(0), in = x.dim(1), out_f = w.dim(0);
  if (w.dim(1) != in || b.dim(0) != out_f)
    throw ShapeError("linear: x " + shape_str(x.shape()) + " weight " + shape_str(w.shape()) + " bias " +
                     shape_str(b.shape()));
  Tensor out({N, out_f}, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto o = out.data<T>();
    auto bv = b.value().data<T>();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t j = 0; j < out_f; ++j) o[n * out_f + j] = bv[j];
    gemm_nt<T>(N, out_f, in, x.value().data<T>().data(), w.value().data<T>().data(), o.data());
  });
  return tape_of(x, "linear").record(
      "linear", std::move(out), {x, w, b}, [x, w, N, in, out_f](const Tensor& g, std::span<Tensor* const> gi) {
        dispatch(g.dtype(), [&](auto tag) {
          using T = decltype(tag);
          const T* G = g.data<T>().data();
          if (gi[0]) gemm_nn<T>(N, in, out_f, G, w.value().data<T>().data(), gi[0]->data<T>().data());
          if (gi[1]) gemm_tn<T>(out_f, in, N, G, x.value().data<T>().data(), gi[1]->data<T>().data());
          if (gi[2]) {
            auto gb = gi[2]->data<T>();
            for (std::size_t n = 0; n < N; ++n)
              for (std::size_t j = 0; j < out_f; ++j) gb[j] += G[n * out_f + j];
          }
        });
      });
}

Var conv2d(Var input, Var weight, Var bias, std::size_t stride, std::size_t pad) {
  require_rank(input, 4, "conv2d");
  require_rank(weight, 4, "conv2d");
  require_rank(bias, 1, "conv2d");
  require_dtype(input, weight, "conv2d");
  require_dtype(input, bias, "conv2d");
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  const std::size_t N = input.dim(0), Ci = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t Co = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != Ci)
    throw ShapeError("conv2d: weight " + shape_str(weight.shape()) + " vs input " + shape_str(input.shape()));
  if (bias.dim(0) != Co) throw ShapeError("conv2d: bias extent " + std::to_string(bias.dim(0)));
  if (kh > H + 2 * pad || kw > W + 2 * pad) throw ShapeError("conv2d: kernel larger than padded input");
  if ((H + 2 * pad - kh) % stride != 0 || (W + 2 * pad - kw) % stride != 0)
    throw ShapeError("conv2d: non-integral output extent for input " + shape_str(input.shape()) + " stride " +
                     std::to_string(stride));
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
  const std::size_t K = Ci * kh * kw, P = Ho * Wo;
  const bool direct = kh == 1 && kw == 1 && stride == 1 && pad == 0;

  Tensor out({N, Co, Ho, Wo}, input.dtype());
  dispatch(input.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* x = input.value().data<T>().data();
    const T* wv = weight.value().data<T>().data();
    auto bv = bias.value().data<T>();
    T* o = out.data<T>().data();
    std::vector<T> cols(direct ? 0 : K * P);
    for (std::size_t n = 0; n < N; ++n) {
      T* on = o + n * Co * P;
      for (std::size_t c = 0; c < Co; ++c) std::fill(on + c * P, on + (c + 1) * P, bv[c]);
      const T* src = x + n * Ci * H * W;
      if (!direct) {
        im2col(src, Ci, H, W, kh, kw, stride, pad, Ho, Wo, cols.data());
        src = cols.data();
      }
      gemm_nn<T>(Co, P, K, wv, src, on);
    }
  });

  return tape_of(input, "conv2d").record(
      "conv2d", std::move(out), {input, weight, bias},
      [=](const Tensor& g, std::span<Tensor* const> gi) {
        dispatch(g.dtype(), [&](auto tag) {
          using T = decltype(tag);
          const T* x = input.value().data<T>().data();
          const T* wv = weight.value().data<T>().data();
          const T* G = g.data<T>().data();
          std::vector<T> cols(direct ? 0 : K * P), gcols(direct ? 0 : K * P);
          for (std::size_t n = 0; n < N; ++n) {
            const T* Gn = G + n * Co * P;
            const T* src = x + n * Ci * H * W;
            if (gi[1]) {
              if (!direct) {
                im2col(src, Ci, H, W, kh, kw, stride, pad, Ho, Wo, cols.data());
                src = cols.data();
              }
              gemm_nt<T>(Co, K, P, Gn, src, gi[1]->data<T>().data());
            }
            if (gi[2]) {
              auto gb = gi[2]->data<T>();
              for (std::size_t c = 0; c < Co; ++c) {
                T acc = 0;
                for (std::size_t p = 0; p < P; ++p) acc += Gn[c * P + p];
                gb[c] += acc;
              }
            }
            if (gi[0]) {
              T* gx = gi[0]->data<T>().data() + n * Ci * H * W;
              if (direct) {
                gemm_tn<T>(K, P, Co, wv, Gn, gx);
              } else {
                std::fill(gcols.begin(), gcols.end(), T(0));
                gemm_tn<T>(K, P, Co, wv, Gn, gcols.data());
                col2im(gcols.data(), Ci, H, W, kh, kw, stride, pad, Ho, Wo, gx);
              }
            }
          }
        });
      });
}

Var conv3d(Var input, Var weight, Var bias, std::size_t pad) {
  require_rank(input, 5, "conv3d");
  require_rank(weight, 5, "conv3d");
  require_rank(bias, 1, "conv3d");
  require_dtype(input, weight, "conv3d");
  require_dtype(input, bias, "conv3d");
  const std::size_t N = input.dim(0), Ci = input.dim(1);
  const Vol in{input.dim(2), input.dim(3), input.dim(4)};
  const std::size_t Co = weight.dim(0), k0 = weight.dim(2), k1 = weight.dim(3), k2 = weight.dim(4);
  if (weight.dim(1) != Ci)
    throw ShapeError("conv3d: weight " + shape_str(weight.shape()) + " vs input " + shape_str(input.shape()));
  if (bias.dim(0) != Co) throw ShapeError("conv3d: bias extent " + std::to_string(bias.dim(0)));
  if (k0 > in.D + 2 * pad || k1 > in.H + 2 * pad || k2 > in.W + 2 * pad)
    throw ShapeError("conv3d: kernel larger than padded input");
  const Vol out_v{in.D + 2 * pad - k0 + 1, in.H + 2 * pad - k1 + 1, in.W + 2 * pad - k2 + 1};
  const std::size_t K = Ci * k0 * k1 * k2, P = out_v.D * out_v.H * out_v.W, S = in.D * in.H * in.W;

  Tensor out({N, Co, out_v.D, out_v.H, out_v.W}, input.dtype());
  dispatch(input.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* x = input.value().data<T>().data();
    const T* wv = weight.value().data<T>().data();
    auto bv = bias.value().data<T>();
    T* o = out.data<T>().data();
    std::vector<T> cols(K * P);
    for (std::size_t n = 0; n < N; ++n) {
      T* on = o + n * Co * P;
      for (std::size_t c = 0; c < Co; ++c) std::fill(on + c * P, on + (c + 1) * P, bv[c]);
      vol2col(x + n * Ci * S, Ci, in, k0, k1, k2, pad, out_v, cols.data());
      gemm_nn<T>(Co, P, K, wv, cols.data(), on);
    }
  });

  return tape_of(input, "conv3d").record(
      "conv3d", std::move(out), {input, weight, bias}, [=](const Tensor& g, std::span<Tensor* const> gi) {
        dispatch(g.dtype(), [&](auto tag) {
          using T = decltype(tag);
          const T* x = input.value().data<T>().data();
          const T* wv = weight.value().data<T>().data();
          const T* G = g.data<T>().data();
          std::vector<T> cols(K * P);
          for (std::size_t n = 0; n < N; ++n) {
            const T* Gn = G + n * Co * P;
            if (gi[1]) {
              vol2col(x + n * Ci * S, Ci, in, k0, k1, k2, pad, out_v, cols.data());
              gemm_nt<T>(Co, K, P, Gn, cols.data(), gi[1]->data<T>().data());
            }
            if (gi[2]) {
              auto gb = gi[2]->data<T>();
              for (std::size_t c = 0; c < Co; ++c) {
                T acc = 0;
                for (std::size_t p = 0; p < P; ++p) acc += Gn[c * P + p];
                gb[c] += acc;
              }
            }
            if (gi[0]) {
              std::fill(cols.begin(), cols.end(), T(0));
              gemm_tn<T>(K, P, Co, wv, Gn, cols.data());
              col2vol(cols.data(), Ci, in, k0, k1, k2, pad, out_v, gi[0]->data<T>().data() + n * Ci * S);
            }
          }
        });
      });
}

Var relu(Var x) {
  Tensor out(x.shape(), x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto v = x.value().data<T>();
    auto o = out.data<T>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = v[i] > T(0) ? v[i] : T(0);
  });
  return tape_of(x, "relu").record("relu", std::move(out), {x}, [x](const Tensor& g, std::span<Tensor* const> gi) {
    dispatch(g.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto gv = g.data<T>();
      auto v = x.value().data<T>();
      auto d = gi[0]->data<T>();
      for (std::size_t i = 0; i < d.size(); ++i)
        if (v[i] > T(0)) d[i] += gv[i];
    });
  });
}

Var max_pool2d(Var x, std::size_t kernel, std::size_t stride) {
  require_rank(x, 4, "max_pool2d");
  if (kernel < 1 || stride < 1) throw ShapeError("max_pool2d: kernel and stride must be >= 1");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (kernel > H || kernel > W) throw ShapeError("max_pool2d: kernel larger than input " + shape_str(x.shape()));
  const std::size_t Ho = (H - kernel) / stride + 1, Wo = (W - kernel) / stride + 1;
  Tensor out({N, C, Ho, Wo}, x.dtype());
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.numel());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto v = x.value().data<T>();
    auto o = out.data<T>();
    for (std::size_t nc = 0; nc < N * C; ++nc)
      for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          std::size_t best = nc * H * W + oy * stride * W + ox * stride;
          for (std::size_t a = 0; a < kernel; ++a)
            for (std::size_t b = 0; b < kernel; ++b) {
              const std::size_t idx = nc * H * W + (oy * stride + a) * W + ox * stride + b;
              if (v[idx] > v[best]) best = idx;
            }
          const std::size_t oi = (nc * Ho + oy) * Wo + ox;
          o[oi] = v[best];
          (*argmax)[oi] = static_cast<std::uint32_t>(best);
        }
  });
  return tape_of(x, "max_pool2d")
      .record("max_pool2d", std::move(out), {x}, [argmax](const Tensor& g, std::span<Tensor* const> gi) {
        dispatch(g.dtype(), [&](auto tag) {
          using T = decltype(tag);
          auto gv = g.data<T>();
          auto d = gi[0]->data<T>();
          for (std::size_t i = 0; i < gv.size(); ++i) d[(*argmax)[i]] += gv[i];
        });
      });
}

Var global_avg_pool(Var x) {
  require_rank(x, 4, "global_avg_pool");
  const std::size_t N = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  Tensor out({N, C}, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto v = x.value().data<T>();
    auto o = out.data<T>();
    for (std::size_t nc = 0; nc < N * C; ++nc) {
      T acc = 0;
      for (std::size_t p = 0; p < P; ++p) acc += v[nc * P + p];
      o[nc] = acc / static_cast<T>(P);
    }
  });
  return tape_of(x, "global_avg_pool")
      .record("global_avg_pool", std::move(out), {x}, [N, C, P](const Tensor& g, std::span<Tensor* const> gi) {
        dispatch(g.dtype(), [&](auto tag) {
          using T = decltype(tag);
          auto gv = g.data<T>();
          auto d = gi[0]->data<T>();
          for (std::size_t nc = 0; nc < N * C; ++nc) {
            const T s = gv[nc] / static_cast<T>(P);
            for (std::size_t p = 0; p < P; ++p) d[nc * P + p] += s;
          }
        });
      });
}

Var softmax(Var x) {
  const auto [R, K] = rows_cols(x.shape());
  Tensor out(x.shape(), x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto v = x.value().data<T>();
    auto o = out.data<T>();
    for (std::size_t r = 0; r < R; ++r) {
      const T* row = v.data() + r * K;
      T m = *std::max_element(row, row + K);
      T s = 0;
      for (std::size_t k = 0; k < K; ++k) s += (o[r * K + k] = std::exp(row[k] - m));
      for (std::size_t k = 0; k < K; ++k) o[r * K + k] /= s;
    }
  });
  Tensor y = out;
  return tape_of(x, "softmax").record(
      "softmax", std::move(out), {x}, [y = std::move(y), R, K](const Tensor& g, std::span<Tensor* const> gi) {
        dispatch(g.dtype(), [&](auto tag) {
          using T = decltype(tag);
          auto gv = g.data<T>();
          auto yv = y.data<T>();
          auto d = gi[0]->data<T>();
          for (std::size_t r = 0; r < R; ++r) {
            T dot = 0;
            for (std::size_t k = 0; k < K; ++k) dot += gv[r * K + k] * yv[r * K + k];
            for (std::size_t k = 0; k < K; ++k) d[r * K + k] += yv[r * K + k] * (gv[r * K + k] - dot);
          }
        });
      });
}

Var log_softmax(Var x) {
  const auto [R, K] = rows_cols(x.shape());
  Tensor out(x.shape(), x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto v = x.value().data<T>();
    auto o = out.data<T>();
    for (std::size_t r = 0; r < R; ++r) {
      const T* row = v.data() + r * K;
      T m = *std::max_element(row, row + K);
      T s = 0;
      for (std::size_t k = 0; k < K; ++k) s += std::exp(row[k] - m);
      const T lse = m + std::log(s);
      for (std::size_t k = 0; k < K; ++k) o[r * K + k] = row[k] - lse;
    }
  });
  Tensor y = out;
  return tape_of(x, "log_softmax")
      .record("log_softmax", std::move(out), {x},
              [y = std::move(y), R, K](const Tensor& g, std::span<Tensor* const> gi) {
                dispatch(g.dtype(), [&](auto tag) {
                  using T = decltype(tag);
                  auto gv = g.data<T>();
                  auto yv = y.data<T>();
                  auto d = gi[0]->data<T>();
                  for (std::size_t r = 0; r < R; ++r) {
                    T gs = 0;
                    for (std::size_t k = 0; k < K; ++k) gs += gv[r * K + k];
                    for (std::size_t k = 0; k < K; ++k) d[r * K + k] += gv[r * K + k] - std::exp(yv[r * K + k]) * gs;
                  }
                });
              });
}

namespace {
void check_labels(std::span<const int> labels, std::size_t R, std::size_t K, std::string_view op) {
  if (labels.size() != R)
    throw ShapeError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for " + std::to_string(R) +
                     " rows");
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= K) throw ShapeError(std::string(op) + ": label out of range");
}
}  // namespace

Var cross_entropy(Var logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t R = logits.dim(0), K = logits.dim(1);
  check_labels(labels, R, K, "cross_entropy");
  std::vector<int> lab(labels.begin(), labels.end());
  Tensor out({1}, logits.dtype());
  Tensor probs(logits.shape(), logits.dtype());
  dispatch(logits.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto v = logits.value().data<T>();
    auto p = probs.data<T>();
    T total = 0;
    for (std::size_t r = 0; r < R; ++r) {
      const T* row = v.data() + r * K;
      T m = *std::max_element(row, row + K);
      T s = 0;
      for (std::size_t k = 0; k < K; ++k) s += (p[r * K + k] = std::exp(row[k] - m));
      for (std::size_t k = 0; k < K; ++k) p[r * K + k] /= s;
      total += m + std::log(s) - row[lab[r]];
    }
    out.data<T>()[0] = total / static_cast<T>(R);
  });
  return tape_of(logits, "cross_entropy")
      .record("cross_entropy", std::move(out), {logits},
              [probs = std::move(probs), lab = std::move(lab), R, K](const Tensor& g, std::span<Tensor* const> gi) {
                dispatch(g.dtype(), [&](auto tag) {
                  using T = decltype(tag);
                  const T s = g.data<T>()[0] / static_cast<T>(R);
                  auto p = probs.data<T>();
                  auto d = gi[0]->data<T>();
                  for (std::size_t r = 0; r < R; ++r)
                    for (std::size_t k = 0; k < K; ++k)
                      d[r * K + k] += s * (p[r * K + k] - (static_cast<int>(k) == lab[r] ? T(1) : T(0)));
                });
              });
}

Var nll_loss(Var logp, std::span<const int> labels) {
  require_rank(logp, 2, "nll_loss");
  const std::size_t R = logp.dim(0), K = logp.dim(1);
  check_labels(labels, R, K, "nll_loss");
  std::vector<int> lab(labels.begin(), labels.end());
  Tensor out({1}, logp.dtype());
  dispatch(logp.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto v = logp.value().data<T>();
    T total = 0;
    for (std::size_t r = 0; r < R; ++r) total -= v[r * K + lab[r]];
    out.data<T>()[0] = total / static_cast<T>(R);
  });
  return tape_of(logp, "nll_loss")
      .record("nll_loss", std::move(out), {logp}, [lab = std::move(lab), R, K](const Tensor& g, std::span<Tensor* const> gi) {
        dispatch(g.dtype(), [&](auto tag) {
          using T = decltype(tag);
          const T s = g.data<T>()[0] / static_cast<T>(R);
          auto d = gi[0]->data<T>();
          for (std::size_t r = 0; r < R; ++r) d[r * K + lab[r]] -= s;
        });
      });
}

Var concat(const std::vector<Var>& xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = xs[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat: axis out of range");
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    if (s.size() != s0.size() || x.dtype() != xs[0].dtype()) throw ShapeError("concat: rank or dtype mismatch");
    for (std::size_t d = 0; d < s.size(); ++d)
      if (d != axis && s[d] != s0[d]) throw ShapeError("concat: extent mismatch " + shape_str(s) + " vs " + shape_str(s0));
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
  for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];
  std::vector<std::size_t> widths;
  for (const auto& x : xs) widths.push_back(x.shape()[axis] * inner);
  const std::size_t row = out_shape[axis] * inner;

  Tensor out(out_shape, s0.empty() ? DType::f64 : xs[0].dtype());
  dispatch(out.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto o = out.data<T>();
    std::size_t off = 0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
      auto v = xs[k].value().data<T>();
      for (std::size_t r = 0; r < outer; ++r)
        std::copy_n(v.data() + r * widths[k], widths[k], o.data() + r * row + off);
      off += widths[k];
    }
  });
  return tape_of(xs[0], "concat").record(
      "concat", std::move(out), xs, [widths, outer, row](const Tensor& g, std::span<Tensor* const> gi) {
        dispatch(g.dtype(), [&](auto tag) {
          using T = decltype(tag);
          auto gv = g.data<T>();
          std::size_t off = 0;
          for (std::size_t k = 0; k < gi.size(); ++k) {
            if (gi[k]) {
              auto d = gi[k]->data<T>();
              for (std::size_t r = 0; r < outer; ++r)
                for (std::size_t j = 0; j < widths[k]; ++j) d[r * widths[k] + j] += gv[r * row + off + j];
            }
            off += widths[k];
          }
        });
      });
}

Var stack(const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeError("stack: no inputs");
  std::vector<Var> lifted;
  lifted.reserve(xs.size());
  for (const auto& x : xs) {
    if (x.shape() != xs[0].shape()) throw ShapeError("stack: shape mismatch");
    Shape s = x.shape();
    s.insert(s.begin(), 1);
    lifted.push_back(reshape(x, s));
  }
  return concat(lifted, 0);
}

Var maximum(Var a, Var b) {
  require_same(a, b, "maximum");
  Tensor out(a.shape(), a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto x = a.value().data<T>(), y = b.value().data<T>();
    auto o = out.data<T>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] >= y[i] ? x[i] : y[i];
  });
  return tape_of(a, "maximum").record("maximum", std::move(out), {a, b}, [a, b](const Tensor& g, std::span<Tensor* const> gi) {
    dispatch(g.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto gv = g.data<T>();
      auto x = a.value().data<T>(), y = b.value().data<T>();
      for (std::size_t i = 0; i < gv.size(); ++i) {
        const bool first = x[i] >= y[i];
        if (first && gi[0]) gi[0]->data<T>()[i] += gv[i];
        if (!first && gi[1]) gi[1]->data<T>()[i] += gv[i];
      }
    });
  });
}

Var reduce_max0(Var x) {
  const Shape& s = x.shape();
  if (s.size() < 2) throw ShapeError("reduce_max0: need rank >= 2, got " + shape_str(s));
  const std::size_t V = s[0];
  Shape out_shape(s.begin() + 1, s.end());
  const std::size_t M = shape_numel(out_shape);
  Tensor out(out_shape, x.dtype());
  auto arg = std::make_shared<std::vector<std::uint32_t>>(M, 0);
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto v = x.value().data<T>();
    auto o = out.data<T>();
    for (std::size_t i = 0; i < M; ++i) {
      std::uint32_t best = 0;
      for (std::size_t k = 1; k < V; ++k)
        if (v[k * M + i] > v[best * M + i]) best = static_cast<std::uint32_t>(k);
      (*arg)[i] = best;
      o[i] = v[best * M + i];
    }
  });
  return tape_of(x, "reduce_max0")
      .record("reduce_max0", std::move(out), {x}, [arg, M](const Tensor& g, std::span<Tensor* const> gi) {
        dispatch(g.dtype(), [&](auto tag) {
          using T = decltype(tag);
          auto gv = g.data<T>();
          auto d = gi[0]->data<T>();
          for (std::size_t i = 0; i < M; ++i) d[(*arg)[i] * M + i] += gv[i];
        });
      });
}

Var outer(Var a, Var b) {
  require_dtype(a, b, "outer");
  const bool batched = a.value().rank() == 2;
  if (a.value().rank() != b.value().rank() || a.value().rank() > 2)
    throw ShapeError("outer: expected two vectors or two [N,*] matrices");
  const std::size_t N = batched ? a.dim(0) : 1;
  if (batched && b.dim(0) != N) throw ShapeError("outer: batch mismatch");
  const std::size_t I = a.shape().back(), J = b.shape().back();
  Tensor out(batched ? Shape{N, I * J} : Shape{I * J}, a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto x = a.value().data<T>(), y = b.value().data<T>();
    auto o = out.data<T>();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < I; ++i)
        for (std::size_t j = 0; j < J; ++j) o[(n * I + i) * J + j] = x[n * I + i] * y[n * J + j];
  });
  return tape_of(a, "outer").record("outer", std::move(out), {a, b}, [a, b, N, I, J](const Tensor& g, std::span<Tensor* const> gi) {
    dispatch(g.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto gv = g.data<T>();
      auto x = a.value().data<T>(), y = b.value().data<T>();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < I; ++i)
          for (std::size_t j = 0; j < J; ++j) {
            const T gg = gv[(n * I + i) * J + j];
            if (gi[0]) gi[0]->data<T>()[n * I + i] += gg * y[n * J + j];
            if (gi[1]) gi[1]->data<T>()[n * J + j] += gg * x[n * I + i];
          }
    });
  });
}

std::size_t l2_guard_hits() { return g_l2_guard_hits.load(); }
void reset_l2_guard_hits() { g_l2_guard_hits = 0; }

Var l2_normalize(Var x) {
  const auto [R, K] = rows_cols(x.shape());
  Tensor out(x.shape(), x.dtype());
  std::vector<double> norms(R);
  std::size_t hits = 0;
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto v = x.value().data<T>();
    auto o = out.data<T>();
    for (std::size_t r = 0; r < R; ++r) {
      T ss = 0;
      for (std::size_t k = 0; k < K; ++k) ss += v[r * K + k] * v[r * K + k];
      const T nrm = std::sqrt(ss);
      norms[r] = static_cast<double>(nrm);
      const T d = nrm > T(kL2Eps) ? nrm : T(kL2Eps);
      if (!(nrm > T(kL2Eps))) ++hits;
      for (std::size_t k = 0; k < K; ++k) o[r * K + k] = v[r * K + k] / d;
    }
  });
  if (hits) {
    g_l2_guard_hits += hits;
    static std::atomic<bool> warned{false};
    if (!warned.exchange(true))
      std::fprintf(stderr, "warning: l2_normalize eps-guard hit (near-zero input row); further hits counted silently\n");
  }
  Tensor y = out;
  return tape_of(x, "l2_normalize")
      .record("l2_normalize", std::move(out), {x},
              [y = std::move(y), norms = std::move(norms), R, K](const Tensor& g, std::span<Tensor* const> gi) {
                dispatch(g.dtype(), [&](auto tag) {
                  using T = decltype(tag);
                  auto gv = g.data<T>();
                  auto yv = y.data<T>();
                  auto d = gi[0]->data<T>();
                  for (std::size_t r = 0; r < R; ++r) {
                    const T nrm = static_cast<T>(norms[r]);
                    if (nrm > T(kL2Eps)) {
                      T dot = 0;
                      for (std::size_t k = 0; k < K; ++k) dot += yv[r * K + k] * gv[r * K + k];
                      for (std::size_t k = 0; k < K; ++k) d[r * K + k] += (gv[r * K + k] - yv[r * K + k] * dot) / nrm;
                    } else {
                      for (std::size_t k = 0; k < K; ++k) d[r * K + k] += gv[r * K + k] / T(kL2Eps);
                    }
                  }
                });
              });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return tape_of(x, "reshape").record("reshape", std::move(out), {x}, [](const Tensor& g, std::span<Tensor* const> gi) {
    gi[0]->add_(g.reshaped(gi[0]->shape()));
  });
}

Var flatten(Var x) {
  const Shape& s = x.shape();
  return reshape(x, {s[0], shape_numel(s) / s[0]});
}

Var permute(Var x, const std::vector<std::size_t>& perm) {
  const Shape& s = x.shape();
  const std::size_t r = s.size();
  if (perm.size() != r) throw ShapeError("permute: permutation rank mismatch");
  std::vector<bool> seen(r, false);
  for (auto p : perm) {
    if (p >= r || seen[p]) throw ShapeError("permute: invalid permutation");
    seen[p] = true;
  }
  Shape out_shape(r);
  for (std::size_t d = 0; d < r; ++d) out_shape[d] = s[perm[d]];
  const auto in_st = strides_of(s);
  // source offset for each output element, walked with an odometer
  auto src = std::make_shared<std::vector<std::size_t>>(shape_numel(s));
  {
    std::vector<std::size_t> idx(r, 0);
    std::size_t off = 0;
    for (std::size_t i = 0; i < src->size(); ++i) {
      (*src)[i] = off;
      for (std::size_t d = r; d-- > 0;) {
        ++idx[d];
        off += in_st[perm[d]];
        if (idx[d] < out_shape[d]) break;
        off -= in_st[perm[d]] * out_shape[d];
        idx[d] = 0;
      }
    }
  }
  Tensor out(out_shape, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto v = x.value().data<T>();
    auto o = out.data<T>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = v[(*src)[i]];
  });
  return tape_of(x, "permute").record("permute", std::move(out), {x}, [src](const Tensor& g, std::span<Tensor* const> gi) {
    dispatch(g.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto gv = g.data<T>();
      auto d = gi[0]->data<T>();
      for (std::size_t i = 0; i < gv.size(); ++i) d[(*src)[i]] += gv[i];
    });
  });
}

Var dropout(Var x, double p, bool train, std::mt19937_64& rng) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must be in [0, 1)");
  if (!train || p == 0.0) return x;
  Tensor mask(x.shape(), x.dtype());
  Tensor out(x.shape(), x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto v = x.value().data<T>();
    auto m = mask.data<T>();
    auto o = out.data<T>();
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    for (std::size_t i = 0; i < m.size(); ++i) {
      m[i] = uniform01<double>(rng) >= p ? keep_scale : T(0);
      o[i] = v[i] * m[i];
    }
  });
  return tape_of(x, "dropout")
      .record("dropout", std::move(out), {x}, [mask = std::move(mask)](const Tensor& g, std::span<Tensor* const> gi) {
        dispatch(g.dtype(), [&](auto tag) {
          using T = decltype(tag);
          auto gv = g.data<T>();
          auto m = mask.data<T>();
          auto d = gi[0]->data<T>();
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += gv[i] * m[i];
        });
      });
}

Var sum(Var x) {
  Tensor out({1}, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    T acc = 0;
    for (auto v : x.value().data<T>()) acc += v;
    out.data<T>()[0] = acc;
  });
  return tape_of(x, "sum").record("sum", std::move(out), {x}, [](const Tensor& g, std::span<Tensor* const> gi) {
    const double s = g.item();
    dispatch(g.dtype(), [&](auto tag) {
      using T = decltype(tag);
      for (auto& d : gi[0]->data<T>()) d += static_cast<T>(s);
    });
  });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().numel())); }

}  // namespace dain::ad
