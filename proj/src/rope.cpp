#include "edlm/rope.hpp"

namespace edlm::rope {

void RopeParams::validate() const {
    if (head_dim < 2 || head_dim % 2 != 0) {
        throw BadConfigError("head_dim must be even and >= 2");
    }
    if (!(theta_base > 0.0)) {
        throw BadConfigError("theta_base must be positive");
    }
}

std::vector<double> pair_frequencies(const RopeParams& params) {
    params.validate();
    std::vector<double> freqs(size_t(params.head_dim / 2));
    for (int p = 0; p < params.head_dim / 2; ++p) {
        freqs[size_t(p)] = std::pow(params.theta_base, -2.0 * p / params.head_dim);
    }
    return freqs;
}

int64_t position_for_entry(const layout::LayoutEntry& entry, layout::PositionMode mode,
                           const std::unordered_map<int64_t, int64_t>& ranks) {
    if (mode == layout::PositionMode::preserved) return entry.position;
    return ranks.at(entry.position);
}

}  // namespace edlm::rope
