#include "dain/encoding.hpp"

#include <algorithm>
#include <cmath>

#include "ordered_sum.hpp"

namespace dain::encoding {

using ad::Var;

EncodingLayerParams::EncodingLayerParams(Tensor c, Tensor s) : codewords(std::move(c)), smoothing(std::move(s)) {
  if (codewords.rank() != 2) throw ShapeError("codewords must be [n, d], got " + shape_str(codewords.shape()));
  if (smoothing.rank() != 1 || smoothing.dim(0) != codewords.dim(0))
    throw ShapeError("smoothing must be [n] matching codewords, got " + shape_str(smoothing.shape()));
  if (smoothing.dtype() != codewords.dtype()) throw ShapeError("codewords/smoothing dtype mismatch");
  if (!smoothing.all_finite() || !codewords.all_finite()) throw NumericError("encoding parameters must be finite");
}

EncodingLayerParams EncodingLayerParams::random_init(std::size_t n, std::size_t d, DType dtype,
                                                     std::mt19937_64& rng) {
  auto u01 = [&] { return static_cast<double>(rng() >> 11) * 0x1.0p-53; };
  const double bound = 1.0 / std::sqrt(static_cast<double>(n));
  Tensor c({n, d}, dtype), s({n}, dtype);
  for (std::size_t i = 0; i < c.numel(); ++i) c.set(i, -bound + 2.0 * bound * u01());
  for (std::size_t i = 0; i < s.numel(); ++i) s.set(i, u01());
  return {std::move(c), std::move(s)};
}

Var residuals(Var X, Var C) {
  const Shape& xs = X.shape();
  if (C.value().rank() != 2) throw ShapeError("residuals: codewords must be [n, d]");
  if (xs.size() != 2 && xs.size() != 3) throw ShapeError("residuals: descriptors must be [m,d] or [N,m,d]");
  if (X.dtype() != C.dtype()) throw ShapeError("residuals: dtype mismatch");
  const bool batched = xs.size() == 3;
  const std::size_t B = batched ? xs[0] : 1, m = xs[xs.size() - 2], d = xs.back();
  const std::size_t n = C.dim(0);
  if (C.dim(1) != d)
    throw ShapeError("residuals: descriptor dim " + std::to_string(d) + " vs codeword dim " + std::to_string(C.dim(1)));

  Shape out_shape = batched ? Shape{B, m, n, d} : Shape{m, n, d};
  Tensor out(out_shape, X.dtype());
  dispatch(X.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto x = X.value().data<T>();
    auto c = C.value().data<T>();
    auto o = out.data<T>();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
          for (std::size_t k = 0; k < d; ++k)
            o[((b * m + i) * n + j) * d + k] = x[(b * m + i) * d + k] - c[j * d + k];
  });
  return X.tape()->record("enc_residuals", std::move(out), {X, C},
                          [B, m, n, d](const Tensor& g, std::span<Tensor* const> gi) {
                            dispatch(g.dtype(), [&](auto tag) {
                              using T = decltype(tag);
                              auto gv = g.data<T>();
                              for (std::size_t b = 0; b < B; ++b)
                                for (std::size_t i = 0; i < m; ++i)
                                  for (std::size_t j = 0; j < n; ++j)
                                    for (std::size_t k = 0; k < d; ++k) {
                                      const T v = gv[((b * m + i) * n + j) * d + k];
                                      if (gi[0]) gi[0]->data<T>()[(b * m + i) * d + k] += v;
                                      if (gi[1]) gi[1]->data<T>()[j * d + k] -= v;
                                    }
                            });
                          });
}

Var assign_weights(Var R, Var s) {
  const Shape& rs = R.shape();
  if (rs.size() < 3) throw ShapeError("assign_weights: residuals must be [...,m,n,d]");
  if (s.value().rank() != 1) throw ShapeError("assign_weights: smoothing must be [n]");
  if (R.dtype() != s.dtype()) throw ShapeError("assign_weights: dtype mismatch");
  const std::size_t d = rs.back(), n = rs[rs.size() - 2];
  if (s.dim(0) != n) throw ShapeError("assign_weights: smoothing extent does not match codeword count");
  const std::size_t rows = shape_numel(rs) / (n * d);  // batch * m
  Shape out_shape(rs.begin(), rs.end() - 1);

  Tensor out(out_shape, R.dtype());
  Tensor sqnorm(out_shape, R.dtype());
  dispatch(R.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto r = R.value().data<T>();
    auto sv = s.value().data<T>();
    auto w = out.data<T>();
    auto q = sqnorm.data<T>();
    for (std::size_t row = 0; row < rows; ++row) {
      T* wr = w.data() + row * n;
      for (std::size_t j = 0; j < n; ++j) {
        const T* rij = r.data() + (row * n + j) * d;
        T ss = 0;
        for (std::size_t k = 0; k < d; ++k) ss += rij[k] * rij[k];
        q[row * n + j] = ss;
        wr[j] = -sv[j] * ss;
      }
      // max-subtraction keeps exp() in range for large s * |r|^2
      const T mx = *std::max_element(wr, wr + n);
      T z = 0;
      for (std::size_t j = 0; j < n; ++j) z += (wr[j] = std::exp(wr[j] - mx));
      for (std::size_t j = 0; j < n; ++j) wr[j] /= z;
    }
  });
  Tensor w_saved = out;
  return R.tape()->record(
      "enc_assign_weights", std::move(out), {R, s},
      [R, s, w_saved = std::move(w_saved), sqnorm = std::move(sqnorm), rows, n, d](const Tensor& g,
                                                                                   std::span<Tensor* const> gi) {
        dispatch(g.dtype(), [&](auto tag) {
          using T = decltype(tag);
          auto gv = g.data<T>();
          auto w = w_saved.data<T>();
          auto q = sqnorm.data<T>();
          auto r = R.value().data<T>();
          auto sv = s.value().data<T>();
          for (std::size_t row = 0; row < rows; ++row) {
            T dot = 0;
            for (std::size_t j = 0; j < n; ++j) dot += gv[row * n + j] * w[row * n + j];
            for (std::size_t j = 0; j < n; ++j) {
              // gradient w.r.t. the pre-softmax logit a_ij = -s_j |r_ij|^2
              const T ga = w[row * n + j] * (gv[row * n + j] - dot);
              if (gi[1]) gi[1]->data<T>()[j] -= ga * q[row * n + j];
              if (gi[0]) {
                T* gr = gi[0]->data<T>().data() + (row * n + j) * d;
                const T* rij = r.data() + (row * n + j) * d;
                const T coef = T(-2) * sv[j] * ga;
                for (std::size_t k = 0; k < d; ++k) gr[k] += coef * rij[k];
              }
            }
          }
        });
      });
}

Var aggregate(Var W, Var R) {
  const Shape& rs = R.shape();
  const Shape& ws = W.shape();
  if (rs.size() < 3 || ws.size() != rs.size() - 1 || !std::equal(ws.begin(), ws.end(), rs.begin()))
    throw ShapeError("aggregate: weights " + shape_str(ws) + " do not match residuals " + shape_str(rs));
  if (W.dtype() != R.dtype()) throw ShapeError("aggregate: dtype mismatch");
  const std::size_t d = rs.back(), n = rs[rs.size() - 2], m = rs[rs.size() - 3];
  const std::size_t B = shape_numel(rs) / (m * n * d);
  Shape out_shape(rs.begin(), rs.end() - 3);
  out_shape.push_back(n);
  out_shape.push_back(d);

  Tensor out(out_shape, R.dtype());
  dispatch(R.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto w = W.value().data<T>();
    auto r = R.value().data<T>();
    auto e = out.data<T>();
    std::vector<T> terms(m);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t k = 0; k < d; ++k) {
          for (std::size_t i = 0; i < m; ++i)
            terms[i] = w[(b * m + i) * n + j] * r[((b * m + i) * n + j) * d + k];
          e[(b * n + j) * d + k] = detail::order_independent_sum(terms);
        }
  });
  return R.tape()->record("enc_aggregate", std::move(out), {W, R},
                          [W, R, B, m, n, d](const Tensor& g, std::span<Tensor* const> gi) {
                            dispatch(g.dtype(), [&](auto tag) {
                              using T = decltype(tag);
                              auto gv = g.data<T>();
                              auto w = W.value().data<T>();
                              auto r = R.value().data<T>();
                              for (std::size_t b = 0; b < B; ++b)
                                for (std::size_t i = 0; i < m; ++i)
                                  for (std::size_t j = 0; j < n; ++j) {
                                    const T* ge = gv.data() + (b * n + j) * d;
                                    const std::size_t ri = ((b * m + i) * n + j) * d;
                                    if (gi[0]) {
                                      T acc = 0;
                                      for (std::size_t k = 0; k < d; ++k) acc += ge[k] * r[ri + k];
                                      gi[0]->data<T>()[(b * m + i) * n + j] += acc;
                                    }
                                    if (gi[1]) {
                                      const T wij = w[(b * m + i) * n + j];
                                      T* gr = gi[1]->data<T>().data() + ri;
                                      for (std::size_t k = 0; k < d; ++k) gr[k] += wij * ge[k];
                                    }
                                  }
                            });
                          });
}

Var encode(Var X, Var C, Var s) {
  Var R = residuals(X, C);
  return aggregate(assign_weights(R, s), R);
}

Var descriptors(Var featmap) {
  const Shape& fs = featmap.shape();
  if (fs.size() != 4) throw ShapeError("descriptors: expected [N,C,H,W], got " + shape_str(fs));
  Var t = ad::permute(featmap, {0, 2, 3, 1});
  return ad::reshape(t, {fs[0], fs[2] * fs[3], fs[1]});
}

Var encoding_forward(Var featmap, Var C, Var s) {
  const Shape& fs = featmap.shape();
  if (fs.size() != 4) throw ShapeError("encoding_forward: expected [N,C,H,W], got " + shape_str(fs));
  if (C.value().rank() != 2 || C.dim(1) != fs[1])
    throw ShapeError("encoding_forward: feature channels " + std::to_string(fs[1]) + " vs codeword dim " +
                     std::to_string(C.value().rank() == 2 ? C.dim(1) : 0));
  Var E = encode(descriptors(featmap), C, s);
  return ad::l2_normalize(ad::reshape(E, {fs[0], C.dim(0) * fs[1]}));
}

}  // namespace dain::encoding
