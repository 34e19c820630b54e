#pragma once

// Two-factor (bilinear) combination of a texture vector a[I] and a spatial
// vector b[J]. The interaction weights w_ij of Y = sum_ij w_ij a_i b_j are not
// materialized here: the vectorized outer product is handed to the fully
// connected layer that follows, whose weight matrix plays that role.

#include "dain/autodiff.hpp"

namespace dain::bilinear {

/// a[I], b[J] -> [I*J] with out[i*J + j] = a_i * b_j; batched rows [N,I],[N,J] -> [N,I*J].
ad::Var bilinear_outer(ad::Var a, ad::Var b);

/// [N,C,H,W] -> [N, C*C]: sum over locations of f_loc (x) f_loc. The location
/// sum is order-independent, so permuting locations leaves the result bit-identical.
ad::Var pooled_bilinear(ad::Var featmap);

}  // namespace dain::bilinear
