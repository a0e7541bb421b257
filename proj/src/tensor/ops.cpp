#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "mifi/tensor.hpp"

namespace mifi {

namespace {

struct AxisSplit {
    std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis, const char* op) {
    if (axis >= shape.size()) {
        throw std::invalid_argument(std::string(op) + ": axis " + std::to_string(axis) +
                                    " out of range for " + shape_str(shape));
    }
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.extent = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

// Elementwise binary op with optional rank-0 broadcast on either side.
template <typename Fwd, typename DA, typename DB>
Tensor binary(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
    const bool a_scalar = a.rank() == 0 && b.rank() != 0;
    const bool b_scalar = b.rank() == 0 && a.rank() != 0;
    if (!a_scalar && !b_scalar && a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(name) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    }
    const Shape out_shape = a_scalar ? b.shape() : a.shape();
    const std::size_t n = shape_numel(out_shape);
    auto ad = a.data();
    auto bd = b.data();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = fwd(ad[a_scalar ? 0 : i], bd[b_scalar ? 0 : i]);
    }
    return record_op(name, out_shape, std::move(out), {a, b},
                     [a, b, a_scalar, b_scalar, n, da, db](const detail::GradContext& ctx) {
                         auto ad = a.data();
                         auto bd = b.data();
                         auto ga = ctx.input_grad(0);
                         auto gb = ctx.input_grad(1);
                         for (std::size_t i = 0; i < n; ++i) {
                             const double x = ad[a_scalar ? 0 : i];
                             const double y = bd[b_scalar ? 0 : i];
                             const double g = ctx.out_grad[i];
                             if (!ga.empty()) ga[a_scalar ? 0 : i] += g * da(x, y);
                             if (!gb.empty()) gb[b_scalar ? 0 : i] += g * db(x, y);
                         }
                     });
}

template <typename Fwd, typename Deriv>
Tensor unary(const char* name, const Tensor& a, Fwd fwd, Deriv deriv) {
    auto ad = a.data();
    std::vector<double> out(ad.size());
    for (std::size_t i = 0; i < ad.size(); ++i) out[i] = fwd(ad[i]);
    return record_op(name, a.shape(), std::move(out), {a}, [a, deriv](const detail::GradContext& ctx) {
        auto ga = ctx.input_grad(0);
        if (ga.empty()) return;
        auto ad = a.data();
        for (std::size_t i = 0; i < ad.size(); ++i) ga[i] += ctx.out_grad[i] * deriv(ad[i]);
    });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary(
        "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary(
        "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary(
        "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

Tensor scale(const Tensor& a, double factor) {
    return unary(
        "scale", a, [factor](double x) { return x * factor; }, [factor](double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
    return unary(
        "add_scalar", a, [value](double x) { return x + value; }, [](double) { return 1.0; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor square(const Tensor& a) {
    return unary(
        "square", a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Tensor relu(const Tensor& a) {
    return unary(
        "relu", a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& a) {
    return unary(
        "exp", a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

Tensor log(const Tensor& a) {
    for (double v : a.data()) {
        if (!(v > 0.0)) throw std::domain_error("log: non-positive input");
    }
    return unary(
        "log", a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Tensor sum(const Tensor& a) {
    auto ad = a.data();
    const double s = std::accumulate(ad.begin(), ad.end(), 0.0);
    return record_op("sum", {}, {s}, {a}, [](const detail::GradContext& ctx) {
        auto ga = ctx.input_grad(0);
        for (auto& g : ga) g += ctx.out_grad[0];
    });
}

Tensor mean(const Tensor& a) {
    const double inv = 1.0 / static_cast<double>(a.numel());
    auto ad = a.data();
    const double s = std::accumulate(ad.begin(), ad.end(), 0.0) * inv;
    return record_op("mean", {}, {s}, {a}, [inv](const detail::GradContext& ctx) {
        auto ga = ctx.input_grad(0);
        for (auto& g : ga) g += ctx.out_grad[0] * inv;
    });
}

Tensor sum_axis(const Tensor& a, std::size_t axis) {
    const auto s = split_at(a.shape(), axis, "sum_axis");
    Shape out_shape = a.shape();
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
    std::vector<double> out(s.outer * s.inner, 0.0);
    auto ad = a.data();
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t e = 0; e < s.extent; ++e)
            for (std::size_t i = 0; i < s.inner; ++i)
                out[o * s.inner + i] += ad[(o * s.extent + e) * s.inner + i];
    return record_op("sum_axis", std::move(out_shape), std::move(out), {a}, [s](const detail::GradContext& ctx) {
        auto ga = ctx.input_grad(0);
        if (ga.empty()) return;
        for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t e = 0; e < s.extent; ++e)
                for (std::size_t i = 0; i < s.inner; ++i)
                    ga[(o * s.extent + e) * s.inner + i] += ctx.out_grad[o * s.inner + i];
    });
}

Tensor mean_axis(const Tensor& a, std::size_t axis) {
    const auto extent = a.dim(axis);
    return scale(sum_axis(a, axis), 1.0 / static_cast<double>(extent));
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    return record_op("reshape", std::move(shape), std::move(out), {a}, [](const detail::GradContext& ctx) {
        auto ga = ctx.input_grad(0);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += ctx.out_grad[i];
    });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
    const auto& in_shape = a.shape();
    const std::size_t r = in_shape.size();
    std::vector<std::size_t> sorted = axes;
    std::sort(sorted.begin(), sorted.end());
    bool valid = axes.size() == r;
    for (std::size_t i = 0; valid && i < r; ++i) valid = sorted[i] == i;
    if (!valid) throw std::invalid_argument("permute: invalid axis order for " + shape_str(in_shape));

    std::vector<std::size_t> in_strides(r, 1);
    for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
    Shape out_shape(r);
    for (std::size_t i = 0; i < r; ++i) out_shape[i] = in_shape[axes[i]];

    const std::size_t n = a.numel();
    std::vector<std::int64_t> index(n);
    std::vector<std::size_t> counter(r, 0);
    for (std::size_t flat = 0; flat < n; ++flat) {
        std::size_t src = 0;
        for (std::size_t i = 0; i < r; ++i) src += counter[i] * in_strides[axes[i]];
        index[flat] = static_cast<std::int64_t>(src);
        for (std::size_t i = r; i-- > 0;) {
            if (++counter[i] < out_shape[i]) break;
            counter[i] = 0;
        }
    }
    return gather(a, std::move(index), std::move(out_shape));
}

Tensor transpose(const Tensor& a) {
    if (a.rank() < 2) throw std::invalid_argument("transpose: rank < 2 for " + shape_str(a.shape()));
    std::vector<std::size_t> axes(a.rank());
    std::iota(axes.begin(), axes.end(), 0);
    std::swap(axes[a.rank() - 1], axes[a.rank() - 2]);
    return permute(a, axes);
}

Tensor gather(const Tensor& a, std::vector<std::int64_t> index, Shape shape) {
    if (index.size() != shape_numel(shape)) {
        throw std::invalid_argument("gather: index count " + std::to_string(index.size()) +
                                    " does not match " + shape_str(shape));
    }
    auto ad = a.data();
    std::vector<double> out(index.size());
    for (std::size_t i = 0; i < index.size(); ++i) {
        const auto src = index[i];
        if (src >= static_cast<std::int64_t>(ad.size())) {
            throw std::out_of_range("gather: index " + std::to_string(src) + " beyond " + shape_str(a.shape()));
        }
        out[i] = src < 0 ? 0.0 : ad[static_cast<std::size_t>(src)];
    }
    return record_op("gather", std::move(shape), std::move(out), {a},
                     [index = std::move(index)](const detail::GradContext& ctx) {
                         auto ga = ctx.input_grad(0);
                         if (ga.empty()) return;
                         for (std::size_t i = 0; i < index.size(); ++i) {
                             if (index[i] >= 0) ga[static_cast<std::size_t>(index[i])] += ctx.out_grad[i];
                         }
                     });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    const Shape& ref = parts.front().shape();
    if (axis >= ref.size()) throw std::invalid_argument("concat: axis out of range for " + shape_str(ref));
    std::vector<AxisSplit> splits;
    std::size_t total = 0;
    for (const auto& p : parts) {
        bool ok = p.rank() == ref.size();
        for (std::size_t i = 0; ok && i < ref.size(); ++i) ok = i == axis || p.shape()[i] == ref[i];
        if (!ok) {
            throw std::invalid_argument("concat: " + shape_str(p.shape()) + " incompatible with " +
                                        shape_str(ref) + " along axis " + std::to_string(axis));
        }
        splits.push_back(split_at(p.shape(), axis, "concat"));
        total += p.shape()[axis];
    }
    Shape out_shape = ref;
    out_shape[axis] = total;
    const std::size_t outer = splits.front().outer;
    const std::size_t inner = splits.front().inner;
    std::vector<double> out(shape_numel(out_shape));
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        auto pd = parts[k].data();
        const std::size_t e = splits[k].extent;
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(pd.begin() + static_cast<std::ptrdiff_t>(o * e * inner), e * inner,
                        out.begin() + static_cast<std::ptrdiff_t>((o * total + offset) * inner));
        offset += e;
    }
    return record_op("concat", std::move(out_shape), std::move(out), parts,
                     [splits, outer, inner, total](const detail::GradContext& ctx) {
                         std::size_t offset = 0;
                         for (std::size_t k = 0; k < splits.size(); ++k) {
                             const std::size_t e = splits[k].extent;
                             auto g = ctx.input_grad(k);
                             if (!g.empty()) {
                                 for (std::size_t o = 0; o < outer; ++o)
                                     for (std::size_t j = 0; j < e * inner; ++j)
                                         g[o * e * inner + j] += ctx.out_grad[(o * total + offset) * inner + j];
                             }
                             offset += e;
                         }
                     });
}

std::vector<Tensor> split(const Tensor& a, std::size_t axis, const std::vector<std::size_t>& sizes) {
    const auto s = split_at(a.shape(), axis, "split");
    const std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
    if (total != s.extent) {
        throw std::invalid_argument("split: sizes sum to " + std::to_string(total) + " but axis " +
                                    std::to_string(axis) + " of " + shape_str(a.shape()) + " has " +
                                    std::to_string(s.extent));
    }
    std::vector<Tensor> out;
    std::size_t offset = 0;
    for (auto size : sizes) {
        Shape shape = a.shape();
        shape[axis] = size;
        std::vector<std::int64_t> index(shape_numel(shape));
        std::size_t k = 0;
        for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t e = 0; e < size; ++e)
                for (std::size_t i = 0; i < s.inner; ++i)
                    index[k++] = static_cast<std::int64_t>((o * s.extent + offset + e) * s.inner + i);
        out.push_back(gather(a, std::move(index), std::move(shape)));
        offset += size;
    }
    return out;
}

Tensor expand(const Tensor& a, Shape shape) {
    const auto& in = a.shape();
    bool ok = in.size() == shape.size();
    for (std::size_t i = 0; ok && i < in.size(); ++i) ok = in[i] == shape[i] || in[i] == 1;
    if (!ok) throw std::invalid_argument("expand: cannot expand " + shape_str(in) + " to " + shape_str(shape));
    const std::size_t r = in.size();
    std::vector<std::size_t> in_strides(r, 1);
    for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in[i];
    const std::size_t n = shape_numel(shape);
    std::vector<std::int64_t> index(n);
    std::vector<std::size_t> counter(r, 0);
    for (std::size_t flat = 0; flat < n; ++flat) {
        std::size_t src = 0;
        for (std::size_t i = 0; i < r; ++i) src += (in[i] == 1 ? 0 : counter[i]) * in_strides[i];
        index[flat] = static_cast<std::int64_t>(src);
        for (std::size_t i = r; i-- > 0;) {
            if (++counter[i] < shape[i]) break;
            counter[i] = 0;
        }
    }
    return gather(a, std::move(index), std::move(shape));
}

Tensor softmax(const Tensor& x, std::size_t axis) {
    const auto s = split_at(x.shape(), axis, "softmax");
    auto xd = x.data();
    std::vector<double> out(xd.size());
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.extent * s.inner + i;
            double mx = xd[base];
            for (std::size_t e = 1; e < s.extent; ++e) mx = std::max(mx, xd[base + e * s.inner]);
            double z = 0.0;
            for (std::size_t e = 0; e < s.extent; ++e) {
                out[base + e * s.inner] = std::exp(xd[base + e * s.inner] - mx);
                z += out[base + e * s.inner];
            }
            for (std::size_t e = 0; e < s.extent; ++e) out[base + e * s.inner] /= z;
        }
    }
    auto probs = std::make_shared<std::vector<double>>(out);
    return record_op("softmax", x.shape(), std::move(out), {x}, [s, probs](const detail::GradContext& ctx) {
        auto gx = ctx.input_grad(0);
        if (gx.empty()) return;
        const auto& p = *probs;
        for (std::size_t o = 0; o < s.outer; ++o) {
            for (std::size_t i = 0; i < s.inner; ++i) {
                const std::size_t base = o * s.extent * s.inner + i;
                double dot = 0.0;
                for (std::size_t e = 0; e < s.extent; ++e)
                    dot += ctx.out_grad[base + e * s.inner] * p[base + e * s.inner];
                for (std::size_t e = 0; e < s.extent; ++e) {
                    const std::size_t k = base + e * s.inner;
                    gx[k] += p[k] * (ctx.out_grad[k] - dot);
                }
            }
        }
    });
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
    const auto s = split_at(x.shape(), axis, "log_softmax");
    auto xd = x.data();
    std::vector<double> out(xd.size());
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.extent * s.inner + i;
            double mx = xd[base];
            for (std::size_t e = 1; e < s.extent; ++e) mx = std::max(mx, xd[base + e * s.inner]);
            double z = 0.0;
            for (std::size_t e = 0; e < s.extent; ++e) z += std::exp(xd[base + e * s.inner] - mx);
            const double lse = mx + std::log(z);
            for (std::size_t e = 0; e < s.extent; ++e) out[base + e * s.inner] = xd[base + e * s.inner] - lse;
        }
    }
    auto logp = std::make_shared<std::vector<double>>(out);
    return record_op("log_softmax", x.shape(), std::move(out), {x}, [s, logp](const detail::GradContext& ctx) {
        auto gx = ctx.input_grad(0);
        if (gx.empty()) return;
        const auto& lp = *logp;
        for (std::size_t o = 0; o < s.outer; ++o) {
            for (std::size_t i = 0; i < s.inner; ++i) {
                const std::size_t base = o * s.extent * s.inner + i;
                double total = 0.0;
                for (std::size_t e = 0; e < s.extent; ++e) total += ctx.out_grad[base + e * s.inner];
                for (std::size_t e = 0; e < s.extent; ++e) {
                    const std::size_t k = base + e * s.inner;
                    gx[k] += ctx.out_grad[k] - std::exp(lp[k]) * total;
                }
            }
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (x.rank() == 0) throw std::invalid_argument("layer_norm: scalar input");
    const std::size_t width = x.shape().back();
    if (gamma.shape() != Shape{width} || beta.shape() != Shape{width}) {
        throw std::invalid_argument("layer_norm: gamma/beta " + shape_str(gamma.shape()) + "/" +
                                    shape_str(beta.shape()) + " do not match last axis of " +
                                    shape_str(x.shape()));
    }
    const std::size_t rows = x.numel() / width;
    auto xd = x.data();
    auto gd = gamma.data();
    auto bd = beta.data();
    auto xhat = std::make_shared<std::vector<double>>(x.numel());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    std::vector<double> out(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xd.data() + r * width;
        double mu = 0.0;
        for (std::size_t j = 0; j < width; ++j) mu += row[j];
        mu /= static_cast<double>(width);
        double var = 0.0;
        for (std::size_t j = 0; j < width; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(width);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t j = 0; j < width; ++j) {
            const double h = (row[j] - mu) * is;
            (*xhat)[r * width + j] = h;
            out[r * width + j] = h * gd[j] + bd[j];
        }
    }
    return record_op("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                     [gamma, xhat, inv_std, rows, width](const detail::GradContext& ctx) {
                         auto gx = ctx.input_grad(0);
                         auto gg = ctx.input_grad(1);
                         auto gb = ctx.input_grad(2);
                         auto gd = gamma.data();
                         const auto& h = *xhat;
                         const double w = static_cast<double>(width);
                         for (std::size_t r = 0; r < rows; ++r) {
                             const double* dy = ctx.out_grad.data() + r * width;
                             double sum_dh = 0.0, sum_dh_h = 0.0;
                             for (std::size_t j = 0; j < width; ++j) {
                                 const double dh = dy[j] * gd[j];
                                 sum_dh += dh;
                                 sum_dh_h += dh * h[r * width + j];
                                 if (!gg.empty()) gg[j] += dy[j] * h[r * width + j];
                                 if (!gb.empty()) gb[j] += dy[j];
                             }
                             if (gx.empty()) continue;
                             const double is = (*inv_std)[r];
                             for (std::size_t j = 0; j < width; ++j) {
                                 const double dh = dy[j] * gd[j];
                                 gx[r * width + j] +=
                                     is * (dh - sum_dh / w - h[r * width + j] * sum_dh_h / w);
                             }
                         }
                     });
}

}  // namespace mifi
