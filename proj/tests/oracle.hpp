#pragma once

// Independent reference implementations used to cross-check the library.
// Deliberately naive: direct nested loops, no code shared with src/.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "loraedge/tensor.hpp"

namespace oracle {

using loraedge::Tensor;

// Cross-correlation, zero padding: w [Cout,Cin,kh,kw], x [B,Cin,H,W].
inline Tensor conv2d_loops(const Tensor& w, const Tensor& x, std::int64_t stride,
                           std::int64_t padding) {
    const std::int64_t co = w.extent(0), ci = w.extent(1), kh = w.extent(2), kw = w.extent(3);
    const std::int64_t b = x.extent(0), h = x.extent(2), wd = x.extent(3);
    const std::int64_t oh = (h + 2 * padding - kh) / stride + 1;
    const std::int64_t ow = (wd + 2 * padding - kw) / stride + 1;
    Tensor out({b, co, oh, ow});
    for (std::int64_t n = 0; n < b; ++n)
        for (std::int64_t f = 0; f < co; ++f)
            for (std::int64_t i = 0; i < oh; ++i)
                for (std::int64_t j = 0; j < ow; ++j) {
                    double acc = 0.0;
                    for (std::int64_t c = 0; c < ci; ++c)
                        for (std::int64_t u = 0; u < kh; ++u)
                            for (std::int64_t v = 0; v < kw; ++v) {
                                const std::int64_t ii = i * stride + u - padding;
                                const std::int64_t jj = j * stride + v - padding;
                                if (ii < 0 || ii >= h || jj < 0 || jj >= wd) continue;
                                acc += w.at(f, c, u, v) * x.at(n, c, ii, jj);
                            }
                    out.at(n, f, i, j) = acc;
                }
    return out;
}

// w [Cout,Cin,k], x [B,Cin,L].
inline Tensor conv1d_loops(const Tensor& w, const Tensor& x, std::int64_t stride,
                           std::int64_t padding) {
    const std::int64_t co = w.extent(0), ci = w.extent(1), k = w.extent(2);
    const std::int64_t b = x.extent(0), len = x.extent(2);
    const std::int64_t ol = (len + 2 * padding - k) / stride + 1;
    Tensor out({b, co, ol});
    for (std::int64_t n = 0; n < b; ++n)
        for (std::int64_t f = 0; f < co; ++f)
            for (std::int64_t i = 0; i < ol; ++i) {
                double acc = 0.0;
                for (std::int64_t c = 0; c < ci; ++c)
                    for (std::int64_t u = 0; u < k; ++u) {
                        const std::int64_t ii = i * stride + u - padding;
                        if (ii < 0 || ii >= len) continue;
                        acc += w.at(f, c, u) * x.at(n, c, ii);
                    }
                out.at(n, f, i) = acc;
            }
    return out;
}

// Central-difference check of an analytic gradient. Relative error per
// coordinate is |a - n| / max(1, |a|, |n|); the report keeps the worst one.
struct FdReport {
    double max_rel = 0.0;
    std::int64_t worst_index = -1;
    double analytic_at_worst = 0.0;
    double numeric_at_worst = 0.0;
};

inline FdReport fd_check(const std::function<double(const std::vector<double>&)>& f,
                         std::vector<double> at, const std::vector<double>& analytic,
                         double h = 1e-6) {
    FdReport rep;
    for (std::size_t i = 0; i < at.size(); ++i) {
        const double saved = at[i];
        at[i] = saved + h;
        const double fp = f(at);
        at[i] = saved - h;
        const double fm = f(at);
        at[i] = saved;
        const double numeric = (fp - fm) / (2.0 * h);
        const double a = analytic[i];
        const double rel = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
        if (rel > rep.max_rel) {
            rep.max_rel = rel;
            rep.worst_index = static_cast<std::int64_t>(i);
            rep.analytic_at_worst = a;
            rep.numeric_at_worst = numeric;
        }
    }
    return rep;
}

// One Adam step on scalars, straight from the update equations.
struct AdamScalar {
    double m = 0.0;
    double v = 0.0;
};

inline double adam_reference_step(double param, double grad, AdamScalar& state, std::int64_t t,
                                  double lr, double beta1 = 0.9, double beta2 = 0.999,
                                  double eps = 1e-8) {
    state.m = beta1 * state.m + (1.0 - beta1) * grad;
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad;
    const double mhat = state.m / (1.0 - std::pow(beta1, static_cast<double>(t)));
    const double vhat = state.v / (1.0 - std::pow(beta2, static_cast<double>(t)));
    return param - lr * mhat / (std::sqrt(vhat) + eps);
}

// Macro F1 from per-class tallies; a class absent from both truth and
// prediction contributes F1 = 0 to the mean.
inline double macro_f1_loops(const std::vector<int>& truth, const std::vector<int>& pred,
                             int n_classes) {
    double sum = 0.0;
    for (int c = 0; c < n_classes; ++c) {
        std::int64_t tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < truth.size(); ++i) {
            if (pred[i] == c && truth[i] == c) ++tp;
            if (pred[i] == c && truth[i] != c) ++fp;
            if (pred[i] != c && truth[i] == c) ++fn;
        }
        const double denom = static_cast<double>(2 * tp + fp + fn);
        sum += denom == 0.0 ? 0.0 : 2.0 * static_cast<double>(tp) / denom;
    }
    return sum / static_cast<double>(n_classes);
}

} // namespace oracle
