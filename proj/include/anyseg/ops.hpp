#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string_view>

#include "anyseg/tensor.hpp"

namespace anyseg::ad {

// Floor for every logarithm argument; softmax outputs can underflow at
// 32-bit and must never reach log() as an exact zero.
inline constexpr double kLogEps = 1e-12;

struct OpAttrs {
    std::vector<int> axes;  // mean-over-axes / sum-over-axes; empty = all axes
    std::vector<int> perm;  // transpose
    Shape shape;            // reshape
    int axis = -1;          // softmax / log-softmax / concat / cosine-similarity
    int factor = 0;         // nearest-upsample-2d / patch-merge-2d
    double scale = 1.0;     // scalar-scale
};

namespace detail {

inline void check_same_shape(const char* kind, const Shape& a, const Shape& b) {
    if (a != b) {
        throw std::invalid_argument(std::string(kind) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
}

inline void check_axis(const char* kind, const Shape& s, int axis) {
    if (axis < 0 || axis >= static_cast<int>(s.size())) {
        throw std::invalid_argument(std::string(kind) + ": axis " + std::to_string(axis) + " out of range for shape " +
                                    shape_str(s));
    }
}

// outer/extent/inner decomposition of a shape around one axis; lane l of the
// axis lives at offset (o * extent + j) * inner + i.
struct Lanes {
    int64_t outer = 1;
    int64_t extent = 1;
    int64_t inner = 1;
};

inline Lanes lanes_for(const Shape& s, int axis) {
    Lanes l;
    for (int d = 0; d < static_cast<int>(s.size()); ++d) {
        if (d < axis) l.outer *= s[d];
        else if (d == axis) l.extent = s[d];
        else l.inner *= s[d];
    }
    return l;
}

inline std::vector<int64_t> row_major_strides(const Shape& s) {
    std::vector<int64_t> st(s.size(), 1);
    for (int d = static_cast<int>(s.size()) - 2; d >= 0; --d) st[d] = st[d + 1] * s[d + 1];
    return st;
}

// Validates reduction axes and returns them sorted; empty input means all axes.
inline std::vector<int> normalize_axes(const char* kind, const Shape& s, std::vector<int> axes) {
    if (axes.empty()) {
        axes.resize(s.size());
        for (size_t d = 0; d < s.size(); ++d) axes[d] = static_cast<int>(d);
        return axes;
    }
    std::sort(axes.begin(), axes.end());
    for (size_t i = 0; i < axes.size(); ++i) {
        check_axis(kind, s, axes[i]);
        if (i > 0 && axes[i] == axes[i - 1]) {
            throw std::invalid_argument(std::string(kind) + ": duplicate axis " + std::to_string(axes[i]));
        }
    }
    return axes;
}

}  // namespace detail

// ---- elementwise and scalar ops ----

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_same_shape("add", a.shape(), b.shape());
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    detail::maybe_record<S>(OpKind::Add, {a, b}, out, [a, b, out]() {
        const auto& g = out.grad();
        if (a.requires_grad()) {
            auto& ga = a.ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (b.requires_grad()) {
            auto& gb = b.ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
    });
    return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_same_shape("sub", a.shape(), b.shape());
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
    detail::maybe_record<S>(OpKind::Sub, {a, b}, out, [a, b, out]() {
        const auto& g = out.grad();
        if (a.requires_grad()) {
            auto& ga = a.ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (b.requires_grad()) {
            auto& gb = b.ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
    return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_same_shape("mul-elementwise", a.shape(), b.shape());
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    detail::maybe_record<S>(OpKind::Mul, {a, b}, out, [a, b, out]() {
        const auto& g = out.grad();
        if (a.requires_grad()) {
            auto& ga = a.ensure_grad();
            const auto& bv2 = b.values();
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
        }
        if (b.requires_grad()) {
            auto& gb = b.ensure_grad();
            const auto& av2 = a.values();
            for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
        }
    });
    return out;
}

template <typename S>
Tensor<S> scalar_scale(const Tensor<S>& x, double c) {
    if (!std::isfinite(c)) {
        throw std::invalid_argument("scalar-scale: non-finite factor");
    }
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    const auto& xv = x.values();
    auto& ov = out.values();
    const S cs = static_cast<S>(c);
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * cs;
    detail::maybe_record<S>(OpKind::ScalarScale, {x}, out, [x, out, cs]() {
        const auto& g = out.grad();
        auto& gx = x.ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * cs;
    });
    return out;
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    const auto& xv = x.values();
    auto& ov = out.values();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] > S(0) ? xv[i] : S(0);
    detail::maybe_record<S>(OpKind::Relu, {x}, out, [x, out]() {
        const auto& g = out.grad();
        const auto& xv2 = x.values();
        auto& gx = x.ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) {
            if (xv2[i] > S(0)) gx[i] += g[i];
        }
    });
    return out;
}

template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    const auto& xv = x.values();
    auto& ov = out.values();
    for (size_t i = 0; i < ov.size(); ++i) {
        const double v = static_cast<double>(xv[i]);
        ov[i] = static_cast<S>(v * 0.5 * (1.0 + std::erf(v / std::sqrt(2.0))));
    }
    detail::maybe_record<S>(OpKind::Gelu, {x}, out, [x, out]() {
        const auto& g = out.grad();
        const auto& xv2 = x.values();
        auto& gx = x.ensure_grad();
        constexpr double inv_sqrt_2pi = 0.3989422804014327;
        for (size_t i = 0; i < g.size(); ++i) {
            const double v = static_cast<double>(xv2[i]);
            const double cdf = 0.5 * (1.0 + std::erf(v / std::sqrt(2.0)));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
            gx[i] += g[i] * static_cast<S>(cdf + v * pdf);
        }
    });
    return out;
}

template <typename S>
Tensor<S> log_clamped(const Tensor<S>& x) {
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    const auto& xv = x.values();
    auto& ov = out.values();
    for (size_t i = 0; i < ov.size(); ++i) {
        ov[i] = static_cast<S>(std::log(std::max(static_cast<double>(xv[i]), kLogEps)));
    }
    detail::maybe_record<S>(OpKind::LogClamped, {x}, out, [x, out]() {
        const auto& g = out.grad();
        const auto& xv2 = x.values();
        auto& gx = x.ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) {
            const double v = static_cast<double>(xv2[i]);
            if (v > kLogEps) gx[i] += static_cast<S>(static_cast<double>(g[i]) / v);
        }
    });
    return out;
}

// ---- matmul ----

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    }
    const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    Tensor<S> out = Tensor<S>::zeros({m, n});
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    for (int i = 0; i < m; ++i) {
        for (int p = 0; p < k; ++p) {
            const S aip = av[i * k + p];
            if (aip == S(0)) continue;
            for (int j = 0; j < n; ++j) ov[i * n + j] += aip * bv[p * n + j];
        }
    }
    detail::maybe_record<S>(OpKind::Matmul, {a, b}, out, [a, b, out, m, k, n]() {
        const auto& g = out.grad();
        if (a.requires_grad()) {
            auto& ga = a.ensure_grad();
            const auto& bv2 = b.values();
            for (int i = 0; i < m; ++i)
                for (int p = 0; p < k; ++p) {
                    S acc = S(0);
                    for (int j = 0; j < n; ++j) acc += g[i * n + j] * bv2[p * n + j];
                    ga[i * k + p] += acc;
                }
        }
        if (b.requires_grad()) {
            auto& gb = b.ensure_grad();
            const auto& av2 = a.values();
            for (int p = 0; p < k; ++p)
                for (int j = 0; j < n; ++j) {
                    S acc = S(0);
                    for (int i = 0; i < m; ++i) acc += av2[i * k + p] * g[i * n + j];
                    gb[p * n + j] += acc;
                }
        }
    });
    return out;
}

// ---- reductions ----

template <typename S>
Tensor<S> sum_axes(const Tensor<S>& x, std::vector<int> axes_in) {
    const Shape& s = x.shape();
    const std::vector<int> axes = detail::normalize_axes("sum-over-axes", s, std::move(axes_in));
    Shape out_shape;
    std::vector<bool> reduced(s.size(), false);
    for (int a : axes) reduced[a] = true;
    for (size_t d = 0; d < s.size(); ++d)
        if (!reduced[d]) out_shape.push_back(s[d]);

    Tensor<S> out = Tensor<S>::zeros(out_shape);
    // contribution of each input dim to the output flat index (0 if reduced)
    std::vector<int64_t> mult(s.size(), 0);
    {
        auto ost = detail::row_major_strides(out_shape);
        size_t kept = 0;
        for (size_t d = 0; d < s.size(); ++d)
            if (!reduced[d]) mult[d] = ost[kept++];
    }
    const auto& xv = x.values();
    auto& ov = out.values();
    std::vector<int> coord(s.size(), 0);
    for (int64_t i = 0; i < x.size(); ++i) {
        int64_t oi = 0;
        for (size_t d = 0; d < s.size(); ++d) oi += coord[d] * mult[d];
        ov[oi] += xv[i];
        for (int d = static_cast<int>(s.size()) - 1; d >= 0; --d) {
            if (++coord[d] < s[d]) break;
            coord[d] = 0;
        }
    }
    detail::maybe_record<S>(OpKind::SumAxes, {x}, out, [x, out, mult, s]() {
        const auto& g = out.grad();
        auto& gx = x.ensure_grad();
        std::vector<int> c(s.size(), 0);
        for (int64_t i = 0; i < x.size(); ++i) {
            int64_t oi = 0;
            for (size_t d = 0; d < s.size(); ++d) oi += c[d] * mult[d];
            gx[i] += g[oi];
            for (int d = static_cast<int>(s.size()) - 1; d >= 0; --d) {
                if (++c[d] < s[d]) break;
                c[d] = 0;
            }
        }
    });
    return out;
}

template <typename S>
Tensor<S> mean_axes(const Tensor<S>& x, std::vector<int> axes_in) {
    const Shape& s = x.shape();
    const std::vector<int> axes = detail::normalize_axes("mean-over-axes", s, std::move(axes_in));
    int64_t count = 1;
    for (int a : axes) count *= s[a];
    Tensor<S> summed = sum_axes(x, axes);
    return scalar_scale(summed, 1.0 / static_cast<double>(count));
}

template <typename S>
Tensor<S> sum_all(const Tensor<S>& x) {
    return sum_axes(x, {});
}

// ---- views ----

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape target) {
    check_shape_valid(target, "reshape");
    if (shape_numel(target) != x.size()) {
        throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(target));
    }
    Tensor<S> out = Tensor<S>::from_values(std::move(target), x.values());
    detail::maybe_record<S>(OpKind::Reshape, {x}, out, [x, out]() {
        const auto& g = out.grad();
        auto& gx = x.ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
    return out;
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& x, std::vector<int> perm) {
    const Shape& s = x.shape();
    if (perm.size() != s.size()) {
        throw std::invalid_argument("transpose: permutation rank " + std::to_string(perm.size()) +
                                    " does not match shape " + shape_str(s));
    }
    std::vector<bool> seen(s.size(), false);
    for (int p : perm) {
        if (p < 0 || p >= static_cast<int>(s.size()) || seen[p]) {
            throw std::invalid_argument("transpose: invalid permutation for shape " + shape_str(s));
        }
        seen[p] = true;
    }
    Shape out_shape(s.size());
    for (size_t j = 0; j < perm.size(); ++j) out_shape[j] = s[perm[j]];
    Tensor<S> out = Tensor<S>::zeros(out_shape);

    auto ost = detail::row_major_strides(out_shape);
    std::vector<int64_t> mult(s.size(), 0);  // input dim -> output stride
    for (size_t j = 0; j < perm.size(); ++j) mult[perm[j]] = ost[j];

    const auto& xv = x.values();
    auto& ov = out.values();
    std::vector<int> coord(s.size(), 0);
    for (int64_t i = 0; i < x.size(); ++i) {
        int64_t oi = 0;
        for (size_t d = 0; d < s.size(); ++d) oi += coord[d] * mult[d];
        ov[oi] = xv[i];
        for (int d = static_cast<int>(s.size()) - 1; d >= 0; --d) {
            if (++coord[d] < s[d]) break;
            coord[d] = 0;
        }
    }
    detail::maybe_record<S>(OpKind::Transpose, {x}, out, [x, out, mult, s]() {
        const auto& g = out.grad();
        auto& gx = x.ensure_grad();
        std::vector<int> c(s.size(), 0);
        for (int64_t i = 0; i < x.size(); ++i) {
            int64_t oi = 0;
            for (size_t d = 0; d < s.size(); ++d) oi += c[d] * mult[d];
            gx[i] += g[oi];
            for (int d = static_cast<int>(s.size()) - 1; d >= 0; --d) {
                if (++c[d] < s[d]) break;
                c[d] = 0;
            }
        }
    });
    return out;
}

template <typename S>
Tensor<S> transpose2d(const Tensor<S>& x) {
    return transpose(x, {1, 0});
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& xs, int axis) {
    if (xs.empty()) throw std::invalid_argument("concat: no operands");
    const Shape& s0 = xs[0].shape();
    detail::check_axis("concat", s0, axis);
    int total = 0;
    for (const auto& x : xs) {
        const Shape& s = x.shape();
        if (s.size() != s0.size()) {
            throw std::invalid_argument("concat: rank mismatch " + shape_str(s0) + " vs " + shape_str(s));
        }
        for (size_t d = 0; d < s.size(); ++d) {
            if (static_cast<int>(d) != axis && s[d] != s0[d]) {
                throw std::invalid_argument("concat: shape mismatch " + shape_str(s0) + " vs " + shape_str(s));
            }
        }
        total += s[axis];
    }
    Shape out_shape = s0;
    out_shape[axis] = total;
    Tensor<S> out = Tensor<S>::zeros(out_shape);

    auto l = detail::lanes_for(s0, axis);  // outer/inner shared by all operands
    auto& ov = out.values();
    int64_t offset = 0;
    for (const auto& x : xs) {
        const int64_t ext = x.shape()[axis];
        const auto& xv = x.values();
        for (int64_t o = 0; o < l.outer; ++o) {
            const int64_t src = o * ext * l.inner;
            const int64_t dst = (o * total + offset) * l.inner;
            std::copy(xv.begin() + src, xv.begin() + src + ext * l.inner, ov.begin() + dst);
        }
        offset += ext;
    }
    detail::maybe_record<S>(OpKind::Concat, xs, out, [xs, out, l, total, axis]() {
        const auto& g = out.grad();
        int64_t offset = 0;
        for (auto& x : xs) {
            const int64_t ext = x.shape()[axis];
            if (x.requires_grad()) {
                auto& gx = x.ensure_grad();
                for (int64_t o = 0; o < l.outer; ++o) {
                    const int64_t dst = o * ext * l.inner;
                    const int64_t src = (o * total + offset) * l.inner;
                    for (int64_t t = 0; t < ext * l.inner; ++t) gx[dst + t] += g[src + t];
                }
            }
            offset += ext;
        }
    });
    return out;
}

// ---- spatial ops on h x w x c grids ----

template <typename S>
Tensor<S> upsample_nearest(const Tensor<S>& x, int factor) {
    if (x.rank() != 3) {
        throw std::invalid_argument("nearest-upsample-2d: expected rank-3 input, got " + shape_str(x.shape()));
    }
    if (factor < 1) throw std::invalid_argument("nearest-upsample-2d: factor must be >= 1");
    const int h = x.shape()[0], w = x.shape()[1], c = x.shape()[2];
    Tensor<S> out = Tensor<S>::zeros({h * factor, w * factor, c});
    const auto& xv = x.values();
    auto& ov = out.values();
    const int W = w * factor;
    for (int y = 0; y < h * factor; ++y) {
        const int sy = y / factor;
        for (int xcol = 0; xcol < W; ++xcol) {
            const int sx = xcol / factor;
            const S* src = &xv[(sy * w + sx) * c];
            S* dst = &ov[(y * W + xcol) * c];
            for (int ch = 0; ch < c; ++ch) dst[ch] = src[ch];
        }
    }
    detail::maybe_record<S>(OpKind::NearestUpsample2d, {x}, out, [x, out, h, w, c, factor]() {
        const auto& g = out.grad();
        auto& gx = x.ensure_grad();
        const int W = w * factor;
        for (int y = 0; y < h * factor; ++y) {
            const int sy = y / factor;
            for (int xcol = 0; xcol < W; ++xcol) {
                const int sx = xcol / factor;
                const S* gsrc = &g[(y * W + xcol) * c];
                S* gdst = &gx[(sy * w + sx) * c];
                for (int ch = 0; ch < c; ++ch) gdst[ch] += gsrc[ch];
            }
        }
    });
    return out;
}

// h x w x c -> (h/f) x (w/f) x (c*f^2). Output channel (dy*f + dx)*c + ch
// holds the input pixel at spatial offset (dy, dx) inside each patch, so
// channel 0 is the top-left subsample of channel 0.
template <typename S>
Tensor<S> patch_merge(const Tensor<S>& x, int factor) {
    if (x.rank() != 3) {
        throw std::invalid_argument("patch-merge-2d: expected rank-3 input, got " + shape_str(x.shape()));
    }
    const int h = x.shape()[0], w = x.shape()[1], c = x.shape()[2];
    if (factor < 1 || h % factor != 0 || w % factor != 0) {
        throw std::invalid_argument("patch-merge-2d: factor " + std::to_string(factor) +
                                    " does not divide spatial extents of " + shape_str(x.shape()));
    }
    const int H = h / factor, W = w / factor, C = c * factor * factor;
    Tensor<S> out = Tensor<S>::zeros({H, W, C});
    const auto& xv = x.values();
    auto& ov = out.values();
    for (int Y = 0; Y < H; ++Y)
        for (int X = 0; X < W; ++X)
            for (int dy = 0; dy < factor; ++dy)
                for (int dx = 0; dx < factor; ++dx) {
                    const S* src = &xv[((Y * factor + dy) * w + X * factor + dx) * c];
                    S* dst = &ov[(Y * W + X) * C + (dy * factor + dx) * c];
                    for (int ch = 0; ch < c; ++ch) dst[ch] = src[ch];
                }
    detail::maybe_record<S>(OpKind::PatchMerge2d, {x}, out, [x, out, h, w, c, factor]() {
        const auto& g = out.grad();
        auto& gx = x.ensure_grad();
        const int H = h / factor, W = w / factor, C = c * factor * factor;
        for (int Y = 0; Y < H; ++Y)
            for (int X = 0; X < W; ++X)
                for (int dy = 0; dy < factor; ++dy)
                    for (int dx = 0; dx < factor; ++dx) {
                        const S* gsrc = &g[(Y * W + X) * C + (dy * factor + dx) * c];
                        S* gdst = &gx[((Y * factor + dy) * w + X * factor + dx) * c];
                        for (int ch = 0; ch < c; ++ch) gdst[ch] += gsrc[ch];
                    }
    });
    return out;
}

// ---- axis-normalized ops ----

template <typename S>
Tensor<S> softmax(const Tensor<S>& x, int axis) {
    detail::check_axis("softmax-over-axis", x.shape(), axis);
    auto l = detail::lanes_for(x.shape(), axis);
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    const auto& xv = x.values();
    auto& ov = out.values();
    for (int64_t o = 0; o < l.outer; ++o)
        for (int64_t in = 0; in < l.inner; ++in) {
            const int64_t base = o * l.extent * l.inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (int64_t j = 0; j < l.extent; ++j) mx = std::max(mx, static_cast<double>(xv[base + j * l.inner]));
            double denom = 0.0;
            for (int64_t j = 0; j < l.extent; ++j) denom += std::exp(static_cast<double>(xv[base + j * l.inner]) - mx);
            for (int64_t j = 0; j < l.extent; ++j) {
                ov[base + j * l.inner] =
                    static_cast<S>(std::exp(static_cast<double>(xv[base + j * l.inner]) - mx) / denom);
            }
        }
    detail::maybe_record<S>(OpKind::Softmax, {x}, out, [x, out, l]() {
        const auto& g = out.grad();
        const auto& sv = out.values();
        auto& gx = x.ensure_grad();
        for (int64_t o = 0; o < l.outer; ++o)
            for (int64_t in = 0; in < l.inner; ++in) {
                const int64_t base = o * l.extent * l.inner + in;
                S dot = S(0);
                for (int64_t j = 0; j < l.extent; ++j) dot += g[base + j * l.inner] * sv[base + j * l.inner];
                for (int64_t j = 0; j < l.extent; ++j) {
                    gx[base + j * l.inner] += sv[base + j * l.inner] * (g[base + j * l.inner] - dot);
                }
            }
    });
    return out;
}

template <typename S>
Tensor<S> log_softmax(const Tensor<S>& x, int axis) {
    detail::check_axis("log-softmax-over-axis", x.shape(), axis);
    auto l = detail::lanes_for(x.shape(), axis);
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    const auto& xv = x.values();
    auto& ov = out.values();
    for (int64_t o = 0; o < l.outer; ++o)
        for (int64_t in = 0; in < l.inner; ++in) {
            const int64_t base = o * l.extent * l.inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (int64_t j = 0; j < l.extent; ++j) mx = std::max(mx, static_cast<double>(xv[base + j * l.inner]));
            double denom = 0.0;
            for (int64_t j = 0; j < l.extent; ++j) denom += std::exp(static_cast<double>(xv[base + j * l.inner]) - mx);
            const double lse = mx + std::log(denom);
            for (int64_t j = 0; j < l.extent; ++j) {
                ov[base + j * l.inner] = static_cast<S>(static_cast<double>(xv[base + j * l.inner]) - lse);
            }
        }
    detail::maybe_record<S>(OpKind::LogSoftmax, {x}, out, [x, out, l]() {
        const auto& g = out.grad();
        const auto& yv = out.values();
        auto& gx = x.ensure_grad();
        for (int64_t o = 0; o < l.outer; ++o)
            for (int64_t in = 0; in < l.inner; ++in) {
                const int64_t base = o * l.extent * l.inner + in;
                S gsum = S(0);
                for (int64_t j = 0; j < l.extent; ++j) gsum += g[base + j * l.inner];
                for (int64_t j = 0; j < l.extent; ++j) {
                    const S sj = static_cast<S>(std::exp(static_cast<double>(yv[base + j * l.inner])));
                    gx[base + j * l.inner] += g[base + j * l.inner] - sj * gsum;
                }
            }
    });
    return out;
}

// Cosine similarity reducing the given axis; lanes with a zero-norm operand
// yield similarity 0 and a zero gradient.
template <typename S>
Tensor<S> cosine_similarity(const Tensor<S>& a, const Tensor<S>& b, int axis) {
    detail::check_same_shape("cosine-similarity-over-axis", a.shape(), b.shape());
    detail::check_axis("cosine-similarity-over-axis", a.shape(), axis);
    const Shape& s = a.shape();
    auto l = detail::lanes_for(s, axis);
    Shape out_shape;
    for (size_t d = 0; d < s.size(); ++d)
        if (static_cast<int>(d) != axis) out_shape.push_back(s[d]);
    Tensor<S> out = Tensor<S>::zeros(out_shape);
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    for (int64_t o = 0; o < l.outer; ++o)
        for (int64_t in = 0; in < l.inner; ++in) {
            const int64_t base = o * l.extent * l.inner + in;
            double dot = 0.0, na = 0.0, nb = 0.0;
            for (int64_t j = 0; j < l.extent; ++j) {
                const double x = av[base + j * l.inner], y = bv[base + j * l.inner];
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            const int64_t oi = o * l.inner + in;
            ov[oi] = (na == 0.0 || nb == 0.0) ? S(0)
                                              : static_cast<S>(dot / (std::sqrt(na) * std::sqrt(nb)));
        }
    detail::maybe_record<S>(OpKind::CosineSimilarity, {a, b}, out, [a, b, out, l]() {
        const auto& g = out.grad();
        const auto& av2 = a.values();
        const auto& bv2 = b.values();
        for (int64_t o = 0; o < l.outer; ++o)
            for (int64_t in = 0; in < l.inner; ++in) {
                const int64_t base = o * l.extent * l.inner + in;
                const int64_t oi = o * l.inner + in;
                const double go = static_cast<double>(g[oi]);
                if (go == 0.0) continue;
                double dot = 0.0, na2 = 0.0, nb2 = 0.0;
                for (int64_t j = 0; j < l.extent; ++j) {
                    const double x = av2[base + j * l.inner], y = bv2[base + j * l.inner];
                    dot += x * y;
                    na2 += x * x;
                    nb2 += y * y;
                }
                if (na2 == 0.0 || nb2 == 0.0) continue;
                const double na = std::sqrt(na2), nb = std::sqrt(nb2);
                const double sim = dot / (na * nb);
                if (a.requires_grad()) {
                    auto& ga = a.ensure_grad();
                    for (int64_t j = 0; j < l.extent; ++j) {
                        const double x = av2[base + j * l.inner], y = bv2[base + j * l.inner];
                        ga[base + j * l.inner] += static_cast<S>(go * (y / (na * nb) - sim * x / na2));
                    }
                }
                if (b.requires_grad()) {
                    auto& gb = b.ensure_grad();
                    for (int64_t j = 0; j < l.extent; ++j) {
                        const double x = av2[base + j * l.inner], y = bv2[base + j * l.inner];
                        gb[base + j * l.inner] += static_cast<S>(go * (x / (na * nb) - sim * y / nb2));
                    }
                }
            }
    });
    return out;
}

// ---- generic dispatch ----

inline const char* op_kind_name(OpKind k) {
    switch (k) {
        case OpKind::Matmul: return "matmul";
        case OpKind::Add: return "add";
        case OpKind::Sub: return "sub";
        case OpKind::Mul: return "mul-elementwise";
        case OpKind::ScalarScale: return "scalar-scale";
        case OpKind::Relu: return "relu";
        case OpKind::Gelu: return "gelu";
        case OpKind::MeanAxes: return "mean-over-axes";
        case OpKind::SumAxes: return "sum-over-axes";
        case OpKind::Reshape: return "reshape";
        case OpKind::Transpose: return "transpose";
        case OpKind::Concat: return "concat";
        case OpKind::Softmax: return "softmax-over-axis";
        case OpKind::LogSoftmax: return "log-softmax-over-axis";
        case OpKind::LogClamped: return "log-clamped";
        case OpKind::NearestUpsample2d: return "nearest-upsample-2d";
        case OpKind::PatchMerge2d: return "patch-merge-2d";
        case OpKind::CosineSimilarity: return "cosine-similarity-over-axis";
    }
    return "?";
}

inline const std::vector<OpKind>& all_op_kinds() {
    static const std::vector<OpKind> kinds = {
        OpKind::Matmul,       OpKind::Add,        OpKind::Sub,
        OpKind::Mul,          OpKind::ScalarScale, OpKind::Relu,
        OpKind::Gelu,         OpKind::MeanAxes,   OpKind::SumAxes,
        OpKind::Reshape,      OpKind::Transpose,  OpKind::Concat,
        OpKind::Softmax,      OpKind::LogSoftmax, OpKind::LogClamped,
        OpKind::NearestUpsample2d, OpKind::PatchMerge2d, OpKind::CosineSimilarity,
    };
    return kinds;
}

inline std::optional<OpKind> parse_op_kind(std::string_view name) {
    for (OpKind k : all_op_kinds()) {
        if (name == op_kind_name(k)) return k;
    }
    return std::nullopt;
}

template <typename S>
Tensor<S> forward_op(OpKind kind, std::span<const Tensor<S>> operands, const OpAttrs& attrs = {}) {
    auto need = [&](size_t n) {
        if (operands.size() != n) {
            throw std::invalid_argument(std::string(op_kind_name(kind)) + ": expected " + std::to_string(n) +
                                        " operands, got " + std::to_string(operands.size()));
        }
    };
    switch (kind) {
        case OpKind::Matmul: need(2); return matmul(operands[0], operands[1]);
        case OpKind::Add: need(2); return add(operands[0], operands[1]);
        case OpKind::Sub: need(2); return sub(operands[0], operands[1]);
        case OpKind::Mul: need(2); return mul(operands[0], operands[1]);
        case OpKind::ScalarScale: need(1); return scalar_scale(operands[0], attrs.scale);
        case OpKind::Relu: need(1); return relu(operands[0]);
        case OpKind::Gelu: need(1); return gelu(operands[0]);
        case OpKind::MeanAxes: need(1); return mean_axes(operands[0], attrs.axes);
        case OpKind::SumAxes: need(1); return sum_axes(operands[0], attrs.axes);
        case OpKind::Reshape: need(1); return reshape(operands[0], attrs.shape);
        case OpKind::Transpose: need(1); return transpose(operands[0], attrs.perm);
        case OpKind::Concat:
            if (operands.empty()) throw std::invalid_argument("concat: no operands");
            return concat(std::vector<Tensor<S>>(operands.begin(), operands.end()), attrs.axis);
        case OpKind::Softmax: need(1); return softmax(operands[0], attrs.axis);
        case OpKind::LogSoftmax: need(1); return log_softmax(operands[0], attrs.axis);
        case OpKind::LogClamped: need(1); return log_clamped(operands[0]);
        case OpKind::NearestUpsample2d: need(1); return upsample_nearest(operands[0], attrs.factor);
        case OpKind::PatchMerge2d: need(1); return patch_merge(operands[0], attrs.factor);
        case OpKind::CosineSimilarity: need(2); return cosine_similarity(operands[0], operands[1], attrs.axis);
    }
    throw std::invalid_argument("unknown operation kind");
}

}  // namespace anyseg::ad
