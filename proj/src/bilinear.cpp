#include "dain/bilinear.hpp"

#include "ordered_sum.hpp"

namespace dain::bilinear {

using ad::Var;

Var bilinear_outer(Var a, Var b) { return ad::outer(a, b); }

Var pooled_bilinear(Var featmap) {
  const Shape& fs = featmap.shape();
  if (fs.size() != 4) throw ShapeError("pooled_bilinear: expected [N,C,H,W], got " + shape_str(fs));
  const std::size_t N = fs[0], C = fs[1], P = fs[2] * fs[3];
  Tensor out({N, C * C}, featmap.dtype());
  dispatch(featmap.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto f = featmap.value().data<T>();
    auto o = out.data<T>();
    std::vector<T> terms(P);
    for (std::size_t n = 0; n < N; ++n) {
      const T* fn = f.data() + n * C * P;
      for (std::size_t a = 0; a < C; ++a)
        for (std::size_t b = a; b < C; ++b) {
          for (std::size_t p = 0; p < P; ++p) terms[p] = fn[a * P + p] * fn[b * P + p];
          const T v = detail::order_independent_sum(terms);
          o[(n * C + a) * C + b] = v;
          o[(n * C + b) * C + a] = v;
        }
    }
  });
  return featmap.tape()->record(
      "pooled_bilinear", std::move(out), {featmap}, [featmap, N, C, P](const Tensor& g, std::span<Tensor* const> gi) {
        dispatch(g.dtype(), [&](auto tag) {
          using T = decltype(tag);
          auto gv = g.data<T>();
          auto f = featmap.value().data<T>();
          auto d = gi[0]->data<T>();
          // dF[a,p] = sum_b (G[a,b] + G[b,a]) F[b,p]
          for (std::size_t n = 0; n < N; ++n) {
            const T* G = gv.data() + n * C * C;
            const T* fn = f.data() + n * C * P;
            T* dn = d.data() + n * C * P;
            for (std::size_t a = 0; a < C; ++a)
              for (std::size_t b = 0; b < C; ++b) {
                const T coef = G[a * C + b] + G[b * C + a];
                if (coef == T(0)) continue;
                for (std::size_t p = 0; p < P; ++p) dn[a * P + p] += coef * fn[b * P + p];
              }
          }
        });
      });
}

}  // namespace dain::bilinear
