#include "loraedge/svd.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>

namespace loraedge::linalg {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

SvdResult truncated_svd(const Tensor& a, std::int64_t r) {
    if (a.order() != 2) {
        throw ShapeError("truncated_svd: expected 2-way tensor, got " + shape_to_string(a.shape()));
    }
    if (r < 1) {
        throw ShapeError("truncated_svd: target rank must be >= 1");
    }
    if (!a.all_finite()) {
        throw NumericError("truncated_svd: input has non-finite entries");
    }
    const std::int64_t m = a.extent(0), n = a.extent(1);
    const std::int64_t rank = std::min({r, m, n});

    Eigen::Map<const RowMatrix> mat(a.data(), m, n);
    Eigen::JacobiSVD<RowMatrix> svd(mat, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto& fu = svd.matrixU();
    const auto& fv = svd.matrixV();
    const auto& fs = svd.singularValues();

    SvdResult out;
    out.u = Tensor({m, rank});
    out.vt = Tensor({rank, n});
    out.singular_values.resize(static_cast<std::size_t>(rank));
    for (std::int64_t j = 0; j < rank; ++j) {
        out.singular_values[static_cast<std::size_t>(j)] = fs(j);
        // sign convention: largest-magnitude entry of the u column non-negative
        std::int64_t pivot = 0;
        double best = -1.0;
        for (std::int64_t i = 0; i < m; ++i) {
            const double mag = std::abs(fu(i, j));
            if (mag > best) {
                best = mag;
                pivot = i;
            }
        }
        const double s = fu(pivot, j) < 0.0 ? -1.0 : 1.0;
        for (std::int64_t i = 0; i < m; ++i) {
            out.u.at(i, j) = s * fu(i, j);
        }
        for (std::int64_t i = 0; i < n; ++i) {
            out.vt.at(j, i) = s * fv(i, j);
        }
    }
    return out;
}

} // namespace loraedge::linalg
