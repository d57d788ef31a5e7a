#pragma once

#include <vector>

#include "loraedge/tensor.hpp"

namespace loraedge::tt {

/// Tensor-train cores G(1)..G(d): core k has shape [r_{k-1}, n_k, r_k],
/// boundary ranks r_0 = r_d = 1, adjacent ranks chain.
struct TTCores {
    std::vector<Tensor> cores;

    std::size_t count() const { return cores.size(); }
    std::vector<std::int64_t> ranks() const;      // r_0..r_d
    std::vector<std::int64_t> mode_sizes() const; // n_1..n_d
    std::int64_t param_count() const;
    void validate() const;
};

/// Sequential unfold + truncated SVD; at step k the truncation rank is
/// min(r_target, rows, cols) of that step's unfolding. The final residual
/// (sigma * vt) becomes the last core.
TTCores tt_svd(const Tensor& w, std::int64_t r_target);

/// Left-to-right mode-1 contraction of all cores, boundary-1 modes squeezed,
/// reshaped to target_shape.
Tensor tt_reconstruct(const TTCores& c, const Shape& target_shape);

struct TTParamCount {
    std::vector<std::int64_t> per_core;
    std::int64_t total = 0;
};

/// Core element counts under the same rank-clamping rule tt_svd applies,
/// computed without decomposing.
TTParamCount tt_param_count(const Shape& shape, std::int64_t r_target);

/// Gradient of sum(grad (.) tt_reconstruct(c)) w.r.t. core `index` (0-based).
/// grad must have the cores' full mode-size element count.
Tensor tt_core_gradient(const TTCores& c, const Tensor& grad, std::size_t index);

} // namespace loraedge::tt
