#include "loraedge/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace loraedge {

std::int64_t shape_product(const Shape& shape) {
    std::int64_t p = 1;
    for (const auto e : shape) {
        p *= e;
    }
    return p;
}

std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

bool shapes_equal(const Shape& a, const Shape& b) { return a == b; }

static void validate_shape(const Shape& shape) {
    if (shape.empty()) {
        throw ShapeError("tensor order must be >= 1");
    }
    for (const auto e : shape) {
        if (e < 1) {
            throw ShapeError("tensor extents must be >= 1, got " + shape_to_string(shape));
        }
    }
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_.assign(static_cast<std::size_t>(shape_product(shape_)), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape(shape_);
    if (static_cast<std::int64_t>(data_.size()) != shape_product(shape_)) {
        throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_to_string(shape_));
    }
}

Tensor Tensor::full(Shape shape, double value) {
    Tensor t(std::move(shape));
    t.fill(value);
    return t;
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const {
    for (const double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

Tensor reshape(const Tensor& t, Shape new_shape) {
    validate_shape(new_shape);
    if (shape_product(new_shape) != t.size()) {
        throw ShapeError("reshape " + shape_to_string(t.shape()) + " -> " + shape_to_string(new_shape) +
                         ": element count mismatch");
    }
    return Tensor(std::move(new_shape), t.vec());
}

Tensor unfold_step(const Tensor& t, std::int64_t left_rows) {
    if (left_rows < 1 || t.size() % left_rows != 0) {
        throw ShapeError("unfold_step: " + std::to_string(left_rows) + " does not divide " +
                         std::to_string(t.size()));
    }
    return reshape(t, {left_rows, t.size() / left_rows});
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.order() != 2 || b.order() != 2 || a.extent(1) != b.extent(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
    }
    const std::int64_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
    Tensor c({m, n});
    const double* pa = a.data();
    const double* pb = b.data();
    double* pc = c.data();
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t p = 0; p < k; ++p) {
            const double av = pa[i * k + p];
            if (av == 0.0) continue;
            const double* brow = pb + p * n;
            double* crow = pc + i * n;
            for (std::int64_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
    return c;
}

Tensor transpose2(const Tensor& a) {
    if (a.order() != 2) {
        throw ShapeError("transpose2: expected 2-way tensor, got " + shape_to_string(a.shape()));
    }
    const std::int64_t m = a.extent(0), n = a.extent(1);
    Tensor t({n, m});
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
            t.at(j, i) = a.at(i, j);
        }
    }
    return t;
}

Tensor mode1_contract(const Tensor& a, const Tensor& b) {
    if (a.order() != 3 || b.order() != 3) {
        throw ShapeError("mode1_contract: operands must be 3-way");
    }
    if (a.extent(2) != b.extent(0)) {
        throw ShapeError("mode1_contract: rank mismatch " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
    }
    const std::int64_t p = a.extent(0), m = a.extent(1), q = a.extent(2);
    const std::int64_t n = b.extent(1), s = b.extent(2);
    Tensor c = matmul(reshape(a, {p * m, q}), reshape(b, {q, n * s}));
    return reshape(c, {p, m, n, s});
}

namespace {

struct ConvDims {
    std::int64_t batch = 0;
    std::int64_t c_in = 0;
    std::int64_t c_out = 0;
    std::int64_t spatial = 0; // 1 or 2
    std::int64_t k[2] = {1, 1};
    std::int64_t in[2] = {1, 1};
    std::int64_t out[2] = {1, 1};
    std::int64_t patch_cols = 0;
    std::int64_t out_locs = 0;
};

ConvDims conv_dims(const Tensor& w, const Tensor& x, std::int64_t stride, std::int64_t padding) {
    if (!(w.order() == 4 || w.order() == 3)) {
        throw ShapeError("conv weight must be 3-way (1D) or 4-way (2D), got " + shape_to_string(w.shape()));
    }
    if (x.order() != w.order()) {
        throw ShapeError("conv input order " + shape_to_string(x.shape()) + " does not match weight " +
                         shape_to_string(w.shape()));
    }
    if (stride < 1 || padding < 0) {
        throw ShapeError("conv: stride must be >= 1 and padding >= 0");
    }
    ConvDims d;
    d.spatial = w.order() - 2;
    d.c_out = w.extent(0);
    d.c_in = w.extent(1);
    d.batch = x.extent(0);
    if (x.extent(1) != d.c_in) {
        throw ShapeError("conv channel mismatch: weight expects " + std::to_string(d.c_in) + ", input has " +
                         std::to_string(x.extent(1)));
    }
    d.patch_cols = d.c_in;
    d.out_locs = 1;
    for (std::int64_t i = 0; i < d.spatial; ++i) {
        d.k[i] = w.extent(static_cast<std::size_t>(2 + i));
        d.in[i] = x.extent(static_cast<std::size_t>(2 + i));
        const std::int64_t o = (d.in[i] + 2 * padding - d.k[i]) / stride + 1;
        if (d.in[i] + 2 * padding < d.k[i] || o < 1) {
            throw ShapeError("conv: empty output extent for input " + shape_to_string(x.shape()) +
                             " with kernel " + shape_to_string(w.shape()));
        }
        d.out[i] = o;
        d.patch_cols *= d.k[i];
        d.out_locs *= o;
    }
    return d;
}

// patches[(b, out...) , (ci, k...)] with zero padding
Tensor build_patches(const Tensor& x, const ConvDims& d, std::int64_t stride, std::int64_t padding) {
    Tensor p({d.batch * d.out_locs, d.patch_cols});
    double* pp = p.data();
    const double* px = x.data();
    if (d.spatial == 1) {
        const std::int64_t L = d.in[0], k = d.k[0];
        for (std::int64_t b = 0; b < d.batch; ++b) {
            for (std::int64_t o = 0; o < d.out[0]; ++o) {
                double* row = pp + (b * d.out_locs + o) * d.patch_cols;
                const std::int64_t base = o * stride - padding;
                for (std::int64_t ci = 0; ci < d.c_in; ++ci) {
                    const double* xin = px + (b * d.c_in + ci) * L;
                    for (std::int64_t t = 0; t < k; ++t) {
                        const std::int64_t it = base + t;
                        row[ci * k + t] = (it >= 0 && it < L) ? xin[it] : 0.0;
                    }
                }
            }
        }
    } else {
        const std::int64_t H = d.in[0], W = d.in[1], kh = d.k[0], kw = d.k[1];
        for (std::int64_t b = 0; b < d.batch; ++b) {
            for (std::int64_t oh = 0; oh < d.out[0]; ++oh) {
                for (std::int64_t ow = 0; ow < d.out[1]; ++ow) {
                    double* row = pp + (b * d.out_locs + oh * d.out[1] + ow) * d.patch_cols;
                    const std::int64_t hb = oh * stride - padding;
                    const std::int64_t wb = ow * stride - padding;
                    for (std::int64_t ci = 0; ci < d.c_in; ++ci) {
                        const double* xin = px + ((b * d.c_in + ci) * H) * W;
                        for (std::int64_t i = 0; i < kh; ++i) {
                            const std::int64_t ih = hb + i;
                            for (std::int64_t j = 0; j < kw; ++j) {
                                const std::int64_t iw = wb + j;
                                row[(ci * kh + i) * kw + j] =
                                    (ih >= 0 && ih < H && iw >= 0 && iw < W) ? xin[ih * W + iw] : 0.0;
                            }
                        }
                    }
                }
            }
        }
    }
    return p;
}

// grad_out re-laid as [(b, out...), c_out]
Tensor gather_grad_rows(const Tensor& grad_out, const ConvDims& d) {
    Tensor g({d.batch * d.out_locs, d.c_out});
    const double* pg = grad_out.data();
    double* pr = g.data();
    for (std::int64_t b = 0; b < d.batch; ++b) {
        for (std::int64_t co = 0; co < d.c_out; ++co) {
            const double* src = pg + (b * d.c_out + co) * d.out_locs;
            for (std::int64_t o = 0; o < d.out_locs; ++o) {
                pr[(b * d.out_locs + o) * d.c_out + co] = src[o];
            }
        }
    }
    return g;
}

void check_grad_out(const Tensor& grad_out, const ConvDims& d) {
    Shape expect;
    expect.push_back(d.batch);
    expect.push_back(d.c_out);
    for (std::int64_t i = 0; i < d.spatial; ++i) {
        expect.push_back(d.out[i]);
    }
    if (grad_out.shape() != expect) {
        throw ShapeError("conv_backward: grad_out shape " + shape_to_string(grad_out.shape()) +
                         " does not match forward output " + shape_to_string(expect));
    }
}

} // namespace

Tensor conv_forward(const Tensor& w, const Tensor& x, std::int64_t stride, std::int64_t padding) {
    const ConvDims d = conv_dims(w, x, stride, padding);
    const Tensor patches = build_patches(x, d, stride, padding);
    const Tensor wt = transpose2(reshape(w, {d.c_out, d.patch_cols}));
    const Tensor y2 = matmul(patches, wt); // [(b,out), c_out]
    Shape out_shape{d.batch, d.c_out};
    for (std::int64_t i = 0; i < d.spatial; ++i) {
        out_shape.push_back(d.out[i]);
    }
    Tensor y(out_shape);
    double* py = y.data();
    const double* p2 = y2.data();
    for (std::int64_t b = 0; b < d.batch; ++b) {
        for (std::int64_t o = 0; o < d.out_locs; ++o) {
            const double* row = p2 + (b * d.out_locs + o) * d.c_out;
            for (std::int64_t co = 0; co < d.c_out; ++co) {
                py[(b * d.c_out + co) * d.out_locs + o] = row[co];
            }
        }
    }
    return y;
}

Tensor conv_backward_weight(const Tensor& w, const Tensor& x, const Tensor& grad_out,
                            std::int64_t stride, std::int64_t padding) {
    const ConvDims d = conv_dims(w, x, stride, padding);
    check_grad_out(grad_out, d);
    const Tensor patches = build_patches(x, d, stride, padding);
    const Tensor grows = gather_grad_rows(grad_out, d);
    Tensor gw = matmul(transpose2(grows), patches); // [c_out, patch_cols]
    return reshape(gw, w.shape());
}

Tensor conv_backward_input(const Tensor& w, const Tensor& x, const Tensor& grad_out,
                           std::int64_t stride, std::int64_t padding) {
    const ConvDims d = conv_dims(w, x, stride, padding);
    check_grad_out(grad_out, d);
    const Tensor grows = gather_grad_rows(grad_out, d);
    const Tensor gpatch = matmul(grows, reshape(w, {d.c_out, d.patch_cols})); // [(b,out), patch_cols]
    Tensor gx(x.shape());
    double* pgx = gx.data();
    const double* pp = gpatch.data();
    if (d.spatial == 1) {
        const std::int64_t L = d.in[0], k = d.k[0];
        for (std::int64_t b = 0; b < d.batch; ++b) {
            for (std::int64_t o = 0; o < d.out[0]; ++o) {
                const double* row = pp + (b * d.out_locs + o) * d.patch_cols;
                const std::int64_t base = o * stride - padding;
                for (std::int64_t ci = 0; ci < d.c_in; ++ci) {
                    double* dst = pgx + (b * d.c_in + ci) * L;
                    for (std::int64_t t = 0; t < k; ++t) {
                        const std::int64_t it = base + t;
                        if (it >= 0 && it < L) dst[it] += row[ci * k + t];
                    }
                }
            }
        }
    } else {
        const std::int64_t H = d.in[0], W = d.in[1], kh = d.k[0], kw = d.k[1];
        for (std::int64_t b = 0; b < d.batch; ++b) {
            for (std::int64_t oh = 0; oh < d.out[0]; ++oh) {
                for (std::int64_t ow = 0; ow < d.out[1]; ++ow) {
                    const double* row = pp + (b * d.out_locs + oh * d.out[1] + ow) * d.patch_cols;
                    const std::int64_t hb = oh * stride - padding;
                    const std::int64_t wb = ow * stride - padding;
                    for (std::int64_t ci = 0; ci < d.c_in; ++ci) {
                        double* dst = pgx + ((b * d.c_in + ci) * H) * W;
                        for (std::int64_t i = 0; i < kh; ++i) {
                            const std::int64_t ih = hb + i;
                            if (ih < 0 || ih >= H) continue;
                            for (std::int64_t j = 0; j < kw; ++j) {
                                const std::int64_t iw = wb + j;
                                if (iw >= 0 && iw < W) dst[ih * W + iw] += row[(ci * kh + i) * kw + j];
                            }
                        }
                    }
                }
            }
        }
    }
    return gx;
}

ConvGrads conv_backward(const Tensor& w, const Tensor& x, const Tensor& grad_out,
                        std::int64_t stride, std::int64_t padding) {
    return ConvGrads{conv_backward_weight(w, x, grad_out, stride, padding),
                     conv_backward_input(w, x, grad_out, stride, padding)};
}

void add_inplace(Tensor& a, const Tensor& b) {
    if (!same_shape(a, b)) {
        throw ShapeError("add: shape mismatch " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
    }
    double* pa = a.data();
    const double* pb = b.data();
    for (std::int64_t i = 0; i < a.size(); ++i) {
        pa[i] += pb[i];
    }
}

void sub_inplace(Tensor& a, const Tensor& b) {
    if (!same_shape(a, b)) {
        throw ShapeError("sub: shape mismatch");
    }
    double* pa = a.data();
    const double* pb = b.data();
    for (std::int64_t i = 0; i < a.size(); ++i) {
        pa[i] -= pb[i];
    }
}

void scale_inplace(Tensor& a, double alpha) {
    for (double* p = a.data(); p != a.data() + a.size(); ++p) {
        *p *= alpha;
    }
}

void axpy(double alpha, const Tensor& x, Tensor& y) {
    if (!same_shape(x, y)) {
        throw ShapeError("axpy: shape mismatch");
    }
    double* py = y.data();
    const double* px = x.data();
    for (std::int64_t i = 0; i < x.size(); ++i) {
        py[i] += alpha * px[i];
    }
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!same_shape(a, b)) {
        throw ShapeError("max_abs_diff: shape mismatch");
    }
    double m = 0.0;
    for (std::int64_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a[i] - b[i]));
    }
    return m;
}

double frobenius_norm(const Tensor& a) {
    double s = 0.0;
    for (std::int64_t i = 0; i < a.size(); ++i) {
        s += a[i] * a[i];
    }
    return std::sqrt(s);
}

} // namespace loraedge
