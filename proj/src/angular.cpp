#include "dain/angular.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include "ordered_sum.hpp"

namespace dain::angular {

using ad::Var;

std::string_view to_string(FeatureCombine c) { return c == FeatureCombine::Sum ? "sum" : "max"; }

std::string_view to_string(MultiviewMode m) {
  switch (m) {
    case MultiviewMode::Voting: return "voting";
    case MultiviewMode::Pooling: return "pooling";
    case MultiviewMode::Filter3D: return "filter3d";
  }
  return "?";
}

std::string_view to_string(VotingRule r) { return r == VotingRule::MeanSoftmax ? "mean" : "majority"; }

FeatureCombine parse_feature_combine(std::string_view s) {
  if (s == "sum") return FeatureCombine::Sum;
  if (s == "max") return FeatureCombine::Max;
  throw std::invalid_argument("unknown feature combine '" + std::string(s) + "' (expected sum|max)");
}

MultiviewMode parse_multiview_mode(std::string_view s) {
  if (s == "voting") return MultiviewMode::Voting;
  if (s == "pooling") return MultiviewMode::Pooling;
  if (s == "filter3d") return MultiviewMode::Filter3D;
  throw std::invalid_argument("unknown multiview mode '" + std::string(s) + "' (expected voting|pooling|filter3d)");
}

VotingRule parse_voting_rule(std::string_view s) {
  if (s == "mean") return VotingRule::MeanSoftmax;
  if (s == "majority") return VotingRule::Majority;
  throw std::invalid_argument("unknown voting rule '" + std::string(s) + "' (expected mean|majority)");
}

void FusionConfig::validate() const {
  if (n_views < 1) throw std::invalid_argument("n_views must be >= 1");
  if (layer_tag != "final") throw std::invalid_argument("layer_tag must be 'final' (last backbone feature map)");
}

void ViewSet::validate() const {
  std::set<double> thetas;
  for (const auto& v : views) {
    if (v.image_v.shape() != v.image_v_delta.shape())
      throw ShapeError("view " + std::to_string(v.theta_deg) + ": I_v and I_{v+delta} shapes differ");
    if (!(v.delta_deg > 0.0)) throw std::invalid_argument("delta_deg must be > 0");
    if (!thetas.insert(v.theta_deg).second)
      throw std::invalid_argument("duplicate view angle " + std::to_string(v.theta_deg) + " in sample " + sample_id);
  }
}

Tensor differential_image(const Tensor& image_v, const Tensor& image_v_delta) {
  if (image_v.shape() != image_v_delta.shape() || image_v.dtype() != image_v_delta.dtype())
    throw ShapeError("differential_image: " + shape_str(image_v.shape()) + " vs " + shape_str(image_v_delta.shape()));
  Tensor out(image_v.shape(), image_v.dtype());
  dispatch(out.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto a = image_v.data<T>(), b = image_v_delta.data<T>();
    auto o = out.data<T>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] - b[i];
  });
  return out;
}

Var fuse_features(Var a, Var b, FeatureCombine mode) {
  if (a.shape() != b.shape())
    throw ShapeError("fuse_features: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  return mode == FeatureCombine::Sum ? ad::add(a, b) : ad::maximum(a, b);
}

int multiview_combine_predictions(std::span<const Tensor> preds, VotingRule rule) {
  if (preds.empty()) throw std::invalid_argument("multiview_combine_predictions: no views");
  const std::size_t K = preds[0].numel();
  for (const auto& p : preds) {
    if (p.numel() != K) throw ShapeError("multiview_combine_predictions: class count differs across views");
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) s += p.at(k);
    if (std::abs(s - 1.0) > 1e-5) throw std::invalid_argument("multiview_combine_predictions: prediction does not sum to 1");
  }
  std::vector<double> score(K, 0.0);
  if (rule == VotingRule::MeanSoftmax) {
    std::vector<double> terms(preds.size());
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t v = 0; v < preds.size(); ++v) terms[v] = preds[v].at(k);
      score[k] = detail::order_independent_sum(terms) / static_cast<double>(preds.size());
    }
  } else {
    for (const auto& p : preds) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < K; ++k)
        if (p.at(k) > p.at(best)) best = k;
      score[best] += 1.0;
    }
  }
  std::size_t best = 0;
  for (std::size_t k = 1; k < K; ++k)
    if (score[k] > score[best]) best = k;
  return static_cast<int>(best);
}

Var multiview_pool_features(Var stack) {
  if (stack.value().rank() != 5) throw ShapeError("multiview_pool_features: expected [V,N,D,H,W]");
  return ad::reduce_max0(stack);
}

Var view_filter3d(Var stack, Var weights, Var bias) {
  const Shape& s = stack.shape();
  if (s.size() != 5) throw ShapeError("view_filter3d: expected [V,N,D,H,W], got " + shape_str(s));
  const std::size_t D = s[2];
  if (weights.shape() != Shape{D, D, 3, 3, 3})
    throw ShapeError("view_filter3d: weights " + shape_str(weights.shape()) + " for depth " + std::to_string(D));
  if (bias.shape() != Shape{D}) throw ShapeError("view_filter3d: bias " + shape_str(bias.shape()));
  Var x = ad::permute(stack, {1, 2, 0, 3, 4});  // [N,D,V,H,W]
  Var y = ad::conv3d(x, weights, bias, 1);
  return ad::reduce_max0(ad::permute(y, {2, 0, 1, 3, 4}));
}

}  // namespace dain::angular
