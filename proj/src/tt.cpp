#include "loraedge/tt.hpp"

#include <algorithm>

#include "loraedge/svd.hpp"

namespace loraedge::tt {

std::vector<std::int64_t> TTCores::ranks() const {
    std::vector<std::int64_t> r;
    r.push_back(cores.empty() ? 1 : cores.front().extent(0));
    for (const auto& c : cores) {
        r.push_back(c.extent(2));
    }
    return r;
}

std::vector<std::int64_t> TTCores::mode_sizes() const {
    std::vector<std::int64_t> n;
    for (const auto& c : cores) {
        n.push_back(c.extent(1));
    }
    return n;
}

std::int64_t TTCores::param_count() const {
    std::int64_t total = 0;
    for (const auto& c : cores) {
        total += c.size();
    }
    return total;
}

void TTCores::validate() const {
    if (cores.empty()) {
        throw ShapeError("TTCores: empty core list");
    }
    for (const auto& c : cores) {
        if (c.order() != 3) {
            throw ShapeError("TTCores: core must be 3-way, got " + shape_to_string(c.shape()));
        }
    }
    if (cores.front().extent(0) != 1 || cores.back().extent(2) != 1) {
        throw ShapeError("TTCores: boundary ranks must be 1");
    }
    for (std::size_t k = 0; k + 1 < cores.size(); ++k) {
        if (cores[k].extent(2) != cores[k + 1].extent(0)) {
            throw ShapeError("TTCores: rank chain broken between cores " + std::to_string(k + 1) +
                             " and " + std::to_string(k + 2));
        }
    }
}

TTCores tt_svd(const Tensor& w, std::int64_t r_target) {
    if (w.order() < 2) {
        throw ShapeError("tt_svd: tensor order must be >= 2");
    }
    if (r_target < 1) {
        throw ShapeError("tt_svd: target rank must be >= 1");
    }
    if (!w.all_finite()) {
        throw NumericError("tt_svd: input has non-finite entries");
    }
    const Shape modes = w.shape();
    const std::size_t d = modes.size();

    TTCores result;
    Tensor residual = w;
    std::int64_t r_prev = 1;
    for (std::size_t k = 0; k + 1 < d; ++k) {
        const std::int64_t rows = r_prev * modes[k];
        const Tensor unfolded = unfold_step(residual, rows);
        const std::int64_t cols = unfolded.extent(1);
        const std::int64_t r_trunc = std::min({r_target, rows, cols});
        const linalg::SvdResult svd = linalg::truncated_svd(unfolded, r_trunc);
        result.cores.push_back(reshape(svd.u, {r_prev, modes[k], r_trunc}));
        // residual = sigma * vt, carried to the next step
        Tensor next({r_trunc, cols});
        for (std::int64_t i = 0; i < r_trunc; ++i) {
            const double s = svd.singular_values[static_cast<std::size_t>(i)];
            for (std::int64_t j = 0; j < cols; ++j) {
                next.at(i, j) = s * svd.vt.at(i, j);
            }
        }
        residual = std::move(next);
        r_prev = r_trunc;
    }
    result.cores.push_back(reshape(residual, {r_prev, modes[d - 1], 1}));
    result.validate();
    return result;
}

Tensor tt_reconstruct(const TTCores& c, const Shape& target_shape) {
    c.validate();
    std::int64_t n_total = 1;
    for (const auto n : c.mode_sizes()) {
        n_total *= n;
    }
    if (n_total != shape_product(target_shape)) {
        throw ShapeError("tt_reconstruct: cores cover " + std::to_string(n_total) +
                         " elements, target wants " + std::to_string(shape_product(target_shape)));
    }
    Tensor acc = c.cores[0]; // [1, n_1, r_1]
    for (std::size_t k = 1; k < c.cores.size(); ++k) {
        const Tensor chained = mode1_contract(
            reshape(acc, {1, acc.size() / acc.shape().back(), acc.shape().back()}), c.cores[k]);
        acc = reshape(chained, {1, chained.size() / chained.shape().back(), chained.shape().back()});
    }
    return reshape(acc, target_shape);
}

TTParamCount tt_param_count(const Shape& shape, std::int64_t r_target) {
    if (shape.size() < 2) {
        throw ShapeError("tt_param_count: shape order must be >= 2");
    }
    if (r_target < 1) {
        throw ShapeError("tt_param_count: target rank must be >= 1");
    }
    for (const auto e : shape) {
        if (e < 1) {
            throw ShapeError("tt_param_count: invalid shape " + shape_to_string(shape));
        }
    }
    TTParamCount out;
    std::int64_t r_prev = 1;
    std::int64_t right = shape_product(shape);
    for (std::size_t k = 0; k + 1 < shape.size(); ++k) {
        const std::int64_t rows = r_prev * shape[k];
        right /= shape[k];
        const std::int64_t cols = right;
        const std::int64_t r_k = std::min({r_target, rows, cols});
        out.per_core.push_back(r_prev * shape[k] * r_k);
        r_prev = r_k;
    }
    out.per_core.push_back(r_prev * shape.back() * 1);
    for (const auto c : out.per_core) {
        out.total += c;
    }
    return out;
}

namespace {

// contraction of cores [0, k) as a matrix [prod n_i, r_k]; identity-like [1,1] for k == 0
Tensor left_chain(const TTCores& c, std::size_t k) {
    Tensor acc({1, 1}, {1.0});
    for (std::size_t i = 0; i < k; ++i) {
        // [N, r] x core [r, n, r'] -> [N*n, r']
        const Tensor core2 = reshape(c.cores[i], {c.cores[i].extent(0), c.cores[i].extent(1) * c.cores[i].extent(2)});
        Tensor next = matmul(acc, core2); // [N, n*r']
        acc = reshape(next, {acc.extent(0) * c.cores[i].extent(1), c.cores[i].extent(2)});
    }
    return acc;
}

// contraction of cores [k, d) as a matrix [r_k, prod n_i]; identity-like [1,1] for k == d
Tensor right_chain(const TTCores& c, std::size_t k) {
    Tensor acc({1, 1}, {1.0});
    for (std::size_t i = c.cores.size(); i-- > k;) {
        // core [r, n, r'] x [r', N] -> [r, n*N]
        const Tensor core2 = reshape(c.cores[i], {c.cores[i].extent(0) * c.cores[i].extent(1), c.cores[i].extent(2)});
        Tensor next = matmul(core2, acc); // [r*n, N]
        acc = reshape(next, {c.cores[i].extent(0), c.cores[i].extent(1) * acc.extent(1)});
    }
    return acc;
}

} // namespace

Tensor tt_core_gradient(const TTCores& c, const Tensor& grad, std::size_t index) {
    c.validate();
    if (index >= c.cores.size()) {
        throw ShapeError("tt_core_gradient: core index out of range");
    }
    std::int64_t n_total = 1;
    for (const auto n : c.mode_sizes()) {
        n_total *= n;
    }
    if (grad.size() != n_total) {
        throw ShapeError("tt_core_gradient: grad element count mismatch");
    }
    const Tensor& core = c.cores[index];
    const std::int64_t r_in = core.extent(0), n_k = core.extent(1), r_out = core.extent(2);

    const Tensor left = left_chain(c, index);                      // [N_left, r_in]
    const Tensor right = right_chain(c, index + 1);                // [r_out, N_right]
    const std::int64_t n_left = left.extent(0);
    const std::int64_t n_right = right.extent(1);

    // grad viewed as [N_left, n_k * N_right]
    const Tensor g1 = reshape(grad, {n_left, n_k * n_right});
    const Tensor t = matmul(transpose2(left), g1);                 // [r_in, n_k * N_right]
    const Tensor t2 = reshape(t, {r_in * n_k, n_right});
    const Tensor out = matmul(t2, transpose2(right));              // [r_in * n_k, r_out]
    return reshape(out, {r_in, n_k, r_out});
}

} // namespace loraedge::tt
