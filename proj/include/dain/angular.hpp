#pragma once

// Differential angular images and the operators that merge the image stream
// with the differential stream (feature fusion) and merge several views of
// one surface (voting, pooling, 3D view filtering).

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dain/autodiff.hpp"

namespace dain::angular {

enum class FeatureCombine { Sum, Max };
enum class MultiviewMode { Voting, Pooling, Filter3D };
/// MeanSoftmax averages the per-view probability vectors; Majority counts hard labels.
enum class VotingRule { MeanSoftmax, Majority };

std::string_view to_string(FeatureCombine c);
std::string_view to_string(MultiviewMode m);
std::string_view to_string(VotingRule r);
FeatureCombine parse_feature_combine(std::string_view s);
MultiviewMode parse_multiview_mode(std::string_view s);
VotingRule parse_voting_rule(std::string_view s);

struct FusionConfig {
  FeatureCombine feature_combine = FeatureCombine::Sum;
  /// Streams merge at the last backbone feature map; no other tag is supported.
  std::string layer_tag = "final";
  MultiviewMode multiview_mode = MultiviewMode::Pooling;
  std::size_t n_views = 4;
  VotingRule voting_rule = VotingRule::MeanSoftmax;

  void validate() const;
};

struct ViewRecord {
  double theta_deg = 0.0;
  Tensor image_v;        // I_v [C,H,W]
  Tensor image_v_delta;  // I_{v+delta} [C,H,W]
  double delta_deg = 5.0;
  std::string illumination;
};

struct ViewSet {
  std::string sample_id;
  std::vector<ViewRecord> views;

  /// Shapes agree per view, angles distinct, delta > 0.
  void validate() const;
};

/// I_delta = I_v - I_{v+delta}. No normalization.
Tensor differential_image(const Tensor& image_v, const Tensor& image_v_delta);

/// Pointwise sum or max of two equal-shape feature maps.
ad::Var fuse_features(ad::Var a, ad::Var b, FeatureCombine mode);

/// Combines per-view probability vectors [K] into one class; ties go to the
/// lowest class index. The result does not depend on view order.
int multiview_combine_predictions(std::span<const Tensor> preds, VotingRule rule = VotingRule::MeanSoftmax);

/// [V,N,D,H,W] -> [N,D,H,W], elementwise max over views.
ad::Var multiview_pool_features(ad::Var stack);

/// 3x3x3 channel-mixing convolution over (view, H, W) with padding 1, then max over views.
/// stack [V,N,D,H,W], weights [D,D,3,3,3], bias [D] -> [N,D,H,W]
ad::Var view_filter3d(ad::Var stack, ad::Var weights, ad::Var bias);

}  // namespace dain::angular
