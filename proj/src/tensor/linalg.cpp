#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mifi/tensor.hpp"

namespace mifi {

namespace {

// c[m,n] += a[m,k] * b[k,n], optionally with either operand transposed in memory.
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
              bool a_t, bool b_t) {
    if (b_t) {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const double* brow = b + j * k;
                double s = 0.0;
                for (std::size_t p = 0; p < k; ++p) s += (a_t ? a[p * m + i] : a[i * k + p]) * brow[p];
                c[i * n + j] += s;
            }
        return;
    }
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a_t ? a[p * m + i] : a[i * k + p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

std::size_t conv_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
    return (in + 2 * pad - k) / stride + 1;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    const auto& as = a.shape();
    const auto& bs = b.shape();
    bool ok = as.size() >= 2 && as.size() == bs.size() && as[as.size() - 1] == bs[bs.size() - 2];
    for (std::size_t i = 0; ok && i + 2 < as.size(); ++i) ok = as[i] == bs[i];
    if (!ok) {
        throw std::invalid_argument("matmul: shape mismatch " + shape_str(as) + " x " + shape_str(bs));
    }
    const std::size_t r = as.size();
    const std::size_t m = as[r - 2], k = as[r - 1], n = bs[r - 1];
    std::size_t batch = 1;
    for (std::size_t i = 0; i + 2 < r; ++i) batch *= as[i];
    Shape out_shape = as;
    out_shape[r - 1] = n;
    std::vector<double> out(batch * m * n, 0.0);
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t t = 0; t < batch; ++t)
        gemm_acc(ad.data() + t * m * k, bd.data() + t * k * n, out.data() + t * m * n, m, k, n, false, false);
    return record_op("matmul", std::move(out_shape), std::move(out), {a, b},
                     [a, b, batch, m, k, n](const detail::GradContext& ctx) {
                         auto ga = ctx.input_grad(0);
                         auto gb = ctx.input_grad(1);
                         auto ad = a.data();
                         auto bd = b.data();
                         for (std::size_t t = 0; t < batch; ++t) {
                             const double* dy = ctx.out_grad.data() + t * m * n;
                             // dA = dY B^T ; dB = A^T dY
                             if (!ga.empty()) gemm_acc(dy, bd.data() + t * k * n, ga.data() + t * m * k, m, n, k, false, true);
                             if (!gb.empty()) gemm_acc(ad.data() + t * m * k, dy, gb.data() + t * k * n, k, m, n, true, false);
                         }
                     });
}

Tensor linear(const Tensor& x, const Tensor& weight, const std::optional<Tensor>& bias) {
    if (weight.rank() != 2 || (x.rank() != 1 && x.rank() != 2) || x.shape().back() != weight.dim(1)) {
        throw std::invalid_argument("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                                    shape_str(weight.shape()));
    }
    const std::size_t out_f = weight.dim(0), in_f = weight.dim(1);
    if (bias && bias->shape() != Shape{out_f}) {
        throw std::invalid_argument("linear: bias " + shape_str(bias->shape()) + " expected [" +
                                    std::to_string(out_f) + "]");
    }
    const std::size_t rows = x.rank() == 1 ? 1 : x.dim(0);
    Shape out_shape = x.rank() == 1 ? Shape{out_f} : Shape{rows, out_f};
    std::vector<double> out(rows * out_f, 0.0);
    if (bias) {
        auto bd = bias->data();
        for (std::size_t r = 0; r < rows; ++r) std::copy(bd.begin(), bd.end(), out.begin() + static_cast<std::ptrdiff_t>(r * out_f));
    }
    gemm_acc(x.data().data(), weight.data().data(), out.data(), rows, in_f, out_f, false, true);
    std::vector<Tensor> inputs{x, weight};
    if (bias) inputs.push_back(*bias);
    const bool has_bias = bias.has_value();
    return record_op("linear", std::move(out_shape), std::move(out), inputs,
                     [x, weight, rows, in_f, out_f, has_bias](const detail::GradContext& ctx) {
                         auto gx = ctx.input_grad(0);
                         auto gw = ctx.input_grad(1);
                         const double* dy = ctx.out_grad.data();
                         if (!gx.empty()) gemm_acc(dy, weight.data().data(), gx.data(), rows, out_f, in_f, false, false);
                         if (!gw.empty()) gemm_acc(dy, x.data().data(), gw.data(), out_f, rows, in_f, true, false);
                         if (has_bias) {
                             auto gb = ctx.input_grad(2);
                             if (!gb.empty())
                                 for (std::size_t r = 0; r < rows; ++r)
                                     for (std::size_t o = 0; o < out_f; ++o) gb[o] += dy[r * out_f + o];
                         }
                     });
}

Tensor conv3d(const Tensor& x, const Tensor& kernel, std::size_t stride, std::size_t pad,
              const std::optional<Tensor>& bias) {
    if (x.rank() != 4 || kernel.rank() != 5 || kernel.dim(1) != x.dim(0)) {
        throw std::invalid_argument("conv3d: input " + shape_str(x.shape()) + " incompatible with kernel " +
                                    shape_str(kernel.shape()));
    }
    const std::size_t ks = kernel.dim(2);
    if (kernel.dim(3) != ks || kernel.dim(4) != ks || ks % 2 == 0) {
        throw std::invalid_argument("conv3d: kernel " + shape_str(kernel.shape()) + " must be cubic with odd edge");
    }
    if (stride == 0) throw std::invalid_argument("conv3d: stride must be positive");
    const std::size_t ci_n = x.dim(0), H = x.dim(1), W = x.dim(2), D = x.dim(3);
    if (ks > H + 2 * pad || ks > W + 2 * pad || ks > D + 2 * pad) {
        throw std::invalid_argument("conv3d: kernel " + shape_str(kernel.shape()) + " larger than padded input " +
                                    shape_str(x.shape()) + " (pad " + std::to_string(pad) + ")");
    }
    const std::size_t co_n = kernel.dim(0);
    if (bias && bias->shape() != Shape{co_n}) {
        throw std::invalid_argument("conv3d: bias " + shape_str(bias->shape()) + " expected [" +
                                    std::to_string(co_n) + "]");
    }
    const std::size_t Ho = conv_extent(H, ks, stride, pad);
    const std::size_t Wo = conv_extent(W, ks, stride, pad);
    const std::size_t Do = conv_extent(D, ks, stride, pad);
    const std::size_t out_vox = Ho * Wo * Do;

    // Visits every (output, input, weight) triple; fn(out_idx, in_idx, w_idx) over runs along the last axis.
    auto sweep = [=](auto&& fn) {
        for (std::size_t co = 0; co < co_n; ++co)
            for (std::size_t ci = 0; ci < ci_n; ++ci)
                for (std::size_t kx = 0; kx < ks; ++kx)
                    for (std::size_t ky = 0; ky < ks; ++ky)
                        for (std::size_t kz = 0; kz < ks; ++kz) {
                            const std::size_t widx = (((co * ci_n + ci) * ks + kx) * ks + ky) * ks + kz;
                            // valid oz: 0 <= oz*stride + kz - pad < D
                            const std::ptrdiff_t off_z = static_cast<std::ptrdiff_t>(kz) - static_cast<std::ptrdiff_t>(pad);
                            std::size_t oz_lo = 0;
                            while (oz_lo < Do && static_cast<std::ptrdiff_t>(oz_lo * stride) + off_z < 0) ++oz_lo;
                            std::size_t oz_hi = Do;
                            while (oz_hi > oz_lo &&
                                   static_cast<std::ptrdiff_t>((oz_hi - 1) * stride) + off_z >= static_cast<std::ptrdiff_t>(D))
                                --oz_hi;
                            for (std::size_t ox = 0; ox < Ho; ++ox) {
                                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(H)) continue;
                                for (std::size_t oy = 0; oy < Wo; ++oy) {
                                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(W)) continue;
                                    const std::size_t obase = ((co * Ho + ox) * Wo + oy) * Do;
                                    const std::size_t ibase = ((ci * H + static_cast<std::size_t>(ix)) * W + static_cast<std::size_t>(iy)) * D;
                                    fn(obase, ibase, widx, oz_lo, oz_hi, off_z);
                                }
                            }
                        }
    };

    std::vector<double> out(co_n * out_vox, 0.0);
    if (bias) {
        auto bd = bias->data();
        for (std::size_t co = 0; co < co_n; ++co)
            std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(co * out_vox), out_vox, bd[co]);
    }
    {
        const double* xd = x.data().data();
        const double* kd = kernel.data().data();
        double* od = out.data();
        sweep([&](std::size_t obase, std::size_t ibase, std::size_t widx, std::size_t lo, std::size_t hi,
                  std::ptrdiff_t off_z) {
            const double w = kd[widx];
            for (std::size_t oz = lo; oz < hi; ++oz)
                od[obase + oz] += w * xd[ibase + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(oz * stride) + off_z)];
        });
    }
    std::vector<Tensor> inputs{x, kernel};
    if (bias) inputs.push_back(*bias);
    const bool has_bias = bias.has_value();
    return record_op("conv3d", {co_n, Ho, Wo, Do}, std::move(out), inputs,
                     [x, kernel, sweep, stride, has_bias, co_n, out_vox](const detail::GradContext& ctx) {
                         auto gx = ctx.input_grad(0);
                         auto gk = ctx.input_grad(1);
                         const double* xd = x.data().data();
                         const double* kd = kernel.data().data();
                         const double* dy = ctx.out_grad.data();
                         if (!gx.empty() || !gk.empty()) {
                             sweep([&](std::size_t obase, std::size_t ibase, std::size_t widx, std::size_t lo,
                                       std::size_t hi, std::ptrdiff_t off_z) {
                                 const double w = kd[widx];
                                 double acc = 0.0;
                                 for (std::size_t oz = lo; oz < hi; ++oz) {
                                     const std::size_t iz = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(oz * stride) + off_z);
                                     const double g = dy[obase + oz];
                                     if (!gx.empty()) gx[ibase + iz] += w * g;
                                     acc += xd[ibase + iz] * g;
                                 }
                                 if (!gk.empty()) gk[widx] += acc;
                             });
                         }
                         if (has_bias) {
                             auto gb = ctx.input_grad(2);
                             if (!gb.empty())
                                 for (std::size_t co = 0; co < co_n; ++co)
                                     for (std::size_t v = 0; v < out_vox; ++v) gb[co] += dy[co * out_vox + v];
                         }
                     });
}

Tensor max_pool3d(const Tensor& x, std::size_t window, std::size_t stride) {
    if (x.rank() != 4 || window == 0 || stride == 0 || window > x.dim(1) || window > x.dim(2) || window > x.dim(3)) {
        throw std::invalid_argument("max_pool3d: window " + std::to_string(window) + " invalid for " +
                                    shape_str(x.shape()));
    }
    const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2), D = x.dim(3);
    const std::size_t Ho = (H - window) / stride + 1, Wo = (W - window) / stride + 1, Do = (D - window) / stride + 1;
    auto xd = x.data();
    std::vector<double> out(C * Ho * Wo * Do);
    std::vector<std::size_t> arg(out.size());
    std::size_t o = 0;
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < Ho; ++i)
            for (std::size_t j = 0; j < Wo; ++j)
                for (std::size_t l = 0; l < Do; ++l, ++o) {
                    std::size_t best = ((c * H + i * stride) * W + j * stride) * D + l * stride;
                    for (std::size_t a = 0; a < window; ++a)
                        for (std::size_t b = 0; b < window; ++b)
                            for (std::size_t e = 0; e < window; ++e) {
                                const std::size_t idx = ((c * H + i * stride + a) * W + j * stride + b) * D + l * stride + e;
                                if (xd[idx] > xd[best]) best = idx;
                            }
                    out[o] = xd[best];
                    arg[o] = best;
                }
    return record_op("max_pool3d", {C, Ho, Wo, Do}, std::move(out), {x},
                     [arg = std::move(arg)](const detail::GradContext& ctx) {
                         auto gx = ctx.input_grad(0);
                         if (gx.empty()) return;
                         for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += ctx.out_grad[i];
                     });
}

Tensor nearest_upsample3d(const Tensor& x, std::size_t factor) {
    if (x.rank() != 4 || factor == 0) {
        throw std::invalid_argument("nearest_upsample3d: invalid input " + shape_str(x.shape()));
    }
    const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2), D = x.dim(3);
    Shape out_shape{C, H * factor, W * factor, D * factor};
    std::vector<std::int64_t> index(shape_numel(out_shape));
    std::size_t o = 0;
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < H * factor; ++i)
            for (std::size_t j = 0; j < W * factor; ++j)
                for (std::size_t l = 0; l < D * factor; ++l)
                    index[o++] = static_cast<std::int64_t>(((c * H + i / factor) * W + j / factor) * D + l / factor);
    return gather(x, std::move(index), std::move(out_shape));
}

Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionWeights& w,
                           std::size_t heads, AttentionTrace* trace) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || k.shape() != v.shape() || q.dim(1) != k.dim(1)) {
        throw std::invalid_argument("multihead_attention: incompatible q/k/v " + shape_str(q.shape()) + " " +
                                    shape_str(k.shape()) + " " + shape_str(v.shape()));
    }
    const std::size_t E = q.dim(1);
    if (heads == 0 || E % heads != 0) {
        throw std::invalid_argument("multihead_attention: embed dim " + std::to_string(E) +
                                    " not divisible by heads " + std::to_string(heads));
    }
    if (w.proj_k.has_value() != w.proj_v.has_value()) {
        throw std::invalid_argument("multihead_attention: proj_k and proj_v must be given together");
    }
    const std::size_t dh = E / heads;
    const std::size_t Lq = q.dim(0);

    Tensor Q = linear(q, w.wq, w.bq);
    Tensor K = linear(k, w.wk, w.bk);
    Tensor V = linear(v, w.wv, w.bv);
    if (w.proj_k) {
        K = matmul(*w.proj_k, K);
        V = matmul(*w.proj_v, V);
    }
    const std::size_t Lk = K.dim(0);
    auto heads_first = [&](const Tensor& t, std::size_t len) {
        return permute(reshape(t, {len, heads, dh}), {1, 0, 2});
    };
    Tensor Qh = heads_first(Q, Lq);
    Tensor Kh = heads_first(K, Lk);
    Tensor Vh = heads_first(V, Lk);
    Tensor scores = scale(matmul(Qh, transpose(Kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor attn = softmax(scores, 2);
    if (trace) trace->weights = attn;
    Tensor ctx = matmul(attn, Vh);
    Tensor merged = reshape(permute(ctx, {1, 0, 2}), {Lq, E});
    return linear(merged, w.wo, w.bo);
}

}  // namespace mifi
