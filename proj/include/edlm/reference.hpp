#pragma once

#include <cstdint>
#include <vector>

#include "edlm/model.hpp"

namespace edlm::reference {

// Plain-loop, double-precision re-implementation of the forward pass. It
// shares nothing with the Eigen engine beyond reading the same weight
// struct, so the two paths can be used to check each other.
std::vector<std::vector<double>> forward_logits(const model::Weights& w,
                                                const std::vector<int32_t>& tokens,
                                                const std::vector<int64_t>& coords,
                                                const model::VisibilitySpec& vis);

}  // namespace edlm::reference
