#pragma once

// Texture encoding layer: soft-assignment residual encoding of convolutional
// descriptors against learnable codewords.
//
//   r_ij = x_i - c_j
//   w_ij = exp(-s_j |r_ij|^2) / sum_k exp(-s_k |r_ik|^2)     (k runs over codewords)
//   e_j  = sum_i w_ij r_ij
//
// Two index readings are possible for the normalizer and the smoothing
// factors: summing over descriptors and keeping one factor per descriptor, or
// summing over codewords with one factor per codeword. Only the second is
// shape-consistent (the descriptor count varies with input size, so a
// per-descriptor factor cannot be a learned parameter, and normalizing over
// descriptors would leave w_i. unnormalized), so that is what is implemented.

#include <cstddef>
#include <random>
#include <string>

#include "dain/autodiff.hpp"

namespace dain::encoding {

inline const std::string kCodewordsName = "encoding.codewords";
inline const std::string kSmoothingName = "encoding.smoothing";

struct EncodingLayerParams {
  Tensor codewords;  // [n, d]
  Tensor smoothing;  // [n], unconstrained, used as given

  EncodingLayerParams(Tensor codewords, Tensor smoothing);

  std::size_t n() const { return codewords.dim(0); }
  std::size_t d() const { return codewords.dim(1); }

  /// codewords ~ U(-1/sqrt(n), 1/sqrt(n)), smoothing ~ U(0, 1).
  static EncodingLayerParams random_init(std::size_t n, std::size_t d, DType dtype, std::mt19937_64& rng);
};

/// X [m,d] or [N,m,d], C [n,d] -> R [m,n,d] or [N,m,n,d]
ad::Var residuals(ad::Var X, ad::Var C);

/// R [...,m,n,d], s [n] -> W [...,m,n]; rows sum to one over the codeword axis.
ad::Var assign_weights(ad::Var R, ad::Var s);

/// W [...,m,n], R [...,m,n,d] -> E [...,n,d]. The sum over descriptors is
/// evaluated in an order-independent way, so E is bit-identical under any
/// permutation of the descriptor rows.
ad::Var aggregate(ad::Var W, ad::Var R);

/// residuals -> assign_weights -> aggregate
ad::Var encode(ad::Var X, ad::Var C, ad::Var s);

/// [N,C,H,W] -> [N, H*W, C]: each spatial position becomes one descriptor.
ad::Var descriptors(ad::Var featmap);

/// [N,C,H,W] -> [N, n*C]: encode the spatial descriptors, flatten E, L2-normalize per item.
ad::Var encoding_forward(ad::Var featmap, ad::Var C, ad::Var s);

}  // namespace dain::encoding
