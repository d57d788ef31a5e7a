#pragma once

#include <vector>

#include "loraedge/tensor.hpp"

namespace loraedge::linalg {

/// Thin SVD factors, rank r: u [m,r] with orthonormal columns, vt [r,n] with
/// orthonormal rows, singular values non-increasing and non-negative.
struct SvdResult {
    Tensor u;
    std::vector<double> singular_values;
    Tensor vt;
};

/// Rank-truncated SVD of a 2-way tensor. The returned rank is min(r, m, n).
/// Deterministic sign convention: the largest-magnitude entry of each u column
/// is forced non-negative (ties broken by lowest row index).
SvdResult truncated_svd(const Tensor& a, std::int64_t r);

} // namespace loraedge::linalg
