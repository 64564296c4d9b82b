#pragma once

#include <cmath>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "edlm/errors.hpp"
#include "edlm/layout.hpp"

namespace edlm::rope {

struct RopeParams {
    int head_dim = 16;
    double theta_base = 10000.0;

    void validate() const;
};

// theta_base^(-2p/head_dim) for pair p = 0..head_dim/2-1
std::vector<double> pair_frequencies(const RopeParams& params);

// Rotate adjacent pairs (v[2p], v[2p+1]) in place by angle position*freqs[p].
// Angles and the 2x2 product run in double and round to T once, so the same
// coordinates give the same rotation regardless of how large they are.
template <typename T>
void rotate_span(const double* freqs, int pairs, int64_t position, T* v) {
    for (int p = 0; p < pairs; ++p) {
        const double angle = double(position) * freqs[p];
        const double c = std::cos(angle);
        const double s = std::sin(angle);
        const double x = double(v[2 * p]);
        const double y = double(v[2 * p + 1]);
        v[2 * p] = T(x * c - y * s);
        v[2 * p + 1] = T(x * s + y * c);
    }
}

template <typename T>
std::vector<T> rotate(const RopeParams& params, int64_t position, const std::vector<T>& v) {
    params.validate();
    if (int(v.size()) != params.head_dim) {
        throw DimensionMismatchError("rotate expects a head_dim-length vector");
    }
    const auto freqs = pair_frequencies(params);
    std::vector<T> out = v;
    rotate_span(freqs.data(), params.head_dim / 2, position, out.data());
    return out;
}

// Coordinate handed to the rotation for one layout entry: the absolute
// position by default, or its dense re-index in compact_rank mode.
int64_t position_for_entry(const layout::LayoutEntry& entry, layout::PositionMode mode,
                           const std::unordered_map<int64_t, int64_t>& ranks);

}  // namespace edlm::rope
