#pragma once

#include <cstdint>
#include <optional>

#include "dain/gradcheck.hpp"
#include "dain/models.hpp"

namespace dain::models {

/// Toy-width f64 configuration: 8x8 input, two small conv blocks, a few codewords, 3 classes.
ModelConfig toy_config(Arch arch, std::uint64_t seed = 0);

/// Finite-difference check of the full training loss (eval mode, no dropout) on a random
/// batch of two items. With a multiview mode, runs the feature-level multiview pass over
/// n_views views instead.
ad::GradcheckReport gradcheck_model(const ModelConfig& cfg, std::uint64_t data_seed,
                                    const ad::GradcheckOptions& opts = {},
                                    std::optional<angular::MultiviewMode> multiview = std::nullopt);

}  // namespace dain::models
