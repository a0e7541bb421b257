#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <tuple>

#include "mifi/model.hpp"

namespace mifi::model {

namespace {

std::size_t stage_channels(const ModelConfig& cfg, std::size_t stage) {
    return cfg.base_channels << stage;
}

class Initializer {
   public:
    Initializer(ModelParams& params, std::uint64_t seed) : params_(params), rng_(seed) {}

    void conv(const std::string& name, std::size_t cout, std::size_t cin, std::size_t k) {
        params_.add(name + ".w", kaiming_uniform({cout, cin, k, k, k}, cin * k * k * k, rng_));
        params_.add(name + ".b", Tensor::zeros({cout}, true));
    }

    void dense(const std::string& name, std::size_t out, std::size_t in, bool bias = true) {
        params_.add(name + ".w", kaiming_uniform({out, in}, in, rng_));
        if (bias) params_.add(name + ".b", Tensor::zeros({out}, true));
    }

    void norm(const std::string& name, std::size_t width) {
        params_.add(name + ".g", Tensor::full({width}, 1.0, true));
        params_.add(name + ".b", Tensor::zeros({width}, true));
    }

    void attention(const std::string& name, std::size_t width, std::size_t proj_rows = 0, std::size_t seq = 0) {
        for (const char* p : {"q", "k", "v", "o"}) {
            params_.add(name + ".w" + p, kaiming_uniform({width, width}, width, rng_));
            params_.add(name + ".b" + p, Tensor::zeros({width}, true));
        }
        if (proj_rows > 0) {
            params_.add(name + ".proj_k", kaiming_uniform({proj_rows, seq}, seq, rng_));
            params_.add(name + ".proj_v", kaiming_uniform({proj_rows, seq}, seq, rng_));
        }
    }

    void feed_forward(const std::string& name, std::size_t width) {
        dense(name + ".fc1", 2 * width, width);
        dense(name + ".fc2", width, 2 * width);
    }

   private:
    ModelParams& params_;
    Rng rng_;
};

Tensor conv(const Tensor& x, const ModelParams& p, const std::string& name, std::size_t stride, std::size_t pad) {
    return conv3d(x, p.at(name + ".w"), stride, pad, p.at(name + ".b"));
}

Tensor dense(const Tensor& x, const ModelParams& p, const std::string& name) {
    return linear(x, p.at(name + ".w"), p.at(name + ".b"));
}

Tensor norm(const Tensor& x, const ModelParams& p, const std::string& name) {
    return layer_norm(x, p.at(name + ".g"), p.at(name + ".b"));
}

Tensor feed_forward(const Tensor& x, const ModelParams& p, const std::string& name) {
    return dense(relu(dense(x, p, name + ".fc1")), p, name + ".fc2");
}

// Downsampling residual block: two 3x3x3 convs (first strided) plus a strided 1x1x1 shortcut.
Tensor down_block(const Tensor& x, const ModelParams& p, const std::string& name) {
    Tensor h = relu(conv(x, p, name + ".conv1", 2, 1));
    h = conv(h, p, name + ".conv2", 1, 1);
    return relu(add(h, conv(x, p, name + ".skip", 2, 0)));
}

Tensor up_block(const Tensor& x, const ModelParams& p, const std::string& name) {
    Tensor u = nearest_upsample3d(x, 2);
    Tensor h = relu(conv(u, p, name + ".conv1", 1, 1));
    h = conv(h, p, name + ".conv2", 1, 1);
    return relu(add(h, conv(u, p, name + ".skip", 1, 0)));
}

std::string stage_name(const char* prefix, std::size_t stage) {
    return std::string(prefix) + ".s" + std::to_string(stage);
}

void check_volume(const Tensor& t, std::size_t channels, const std::array<std::size_t, 3>& extent, const char* what) {
    const Shape expected{channels, extent[0], extent[1], extent[2]};
    if (t.shape() != expected) {
        throw std::invalid_argument(std::string(what) + ": expected " + shape_str(expected) + ", got " +
                                    shape_str(t.shape()));
    }
}

// One co-attention step: the tabular token attends to the image token and vice versa,
// each followed by a feed-forward layer; residual connections throughout.
std::pair<Tensor, Tensor> co_attention(const Tensor& tab, const Tensor& img, const ModelParams& p,
                                       const std::string& name, std::size_t heads) {
    Tensor tn = norm(tab, p, name + ".ln_tab");
    Tensor in = norm(img, p, name + ".ln_img");
    Tensor t1 = add(tab, multihead_attention(tn, in, in, attention_weights(p, name + ".tab_from_img"), heads));
    Tensor i1 = add(img, multihead_attention(in, tn, tn, attention_weights(p, name + ".img_from_tab"), heads));
    Tensor t2 = add(t1, feed_forward(norm(t1, p, name + ".ln_tab_ff"), p, name + ".ff_tab"));
    Tensor i2 = add(i1, feed_forward(norm(i1, p, name + ".ln_img_ff"), p, name + ".ff_img"));
    return {t2, i2};
}

}  // namespace

ModelParams init_params(const ModelConfig& cfg) {
    cfg.validate();
    ModelParams params;
    Initializer init(params, cfg.seed);
    const std::size_t C = cfg.base_channels;
    const std::size_t E = cfg.embed_dim;

    init.conv("enc.stem", C, 1, 3);
    for (std::size_t s = 1; s <= cfg.n_stages; ++s) {
        const std::size_t cin = stage_channels(cfg, s - 1), cout = stage_channels(cfg, s);
        const auto name = stage_name("enc", s);
        init.conv(name + ".conv1", cout, cin, 3);
        init.conv(name + ".conv2", cout, cout, 3);
        init.conv(name + ".skip", cout, cin, 1);
        init.conv(name + ".proj", C, cout, 1);
    }

    const std::size_t B = stage_channels(cfg, cfg.n_stages);
    init.norm("bottleneck.ln_attn", B);
    init.attention("bottleneck.attn", B);
    init.norm("bottleneck.ln_ff", B);
    init.feed_forward("bottleneck.ff", B);

    init.attention("mffsm.attn", C, cfg.linformer_k, cfg.fused_length());

    for (std::size_t s = cfg.n_stages; s >= 1; --s) {
        const std::size_t cin = stage_channels(cfg, s) + C, cout = stage_channels(cfg, s - 1);
        const auto name = stage_name("dec", s);
        init.conv(name + ".conv1", cout, cin, 3);
        init.conv(name + ".conv2", cout, cout, 3);
        init.conv(name + ".skip", cout, cin, 1);
    }
    init.conv("dec.out", 1, C, 1);

    init.dense("cmifm.tab_embed", E, cfg.tabular_dim);
    for (std::size_t s = 1; s <= cfg.n_stages; ++s) init.dense("cmifm.img_embed" + std::to_string(s), E, C);
    for (std::size_t step = 1; step <= cfg.cmifm_steps; ++step) {
        const auto name = "cmifm.step" + std::to_string(step);
        init.norm(name + ".ln_tab", E);
        init.norm(name + ".ln_img", E);
        init.attention(name + ".tab_from_img", E);
        init.attention(name + ".img_from_tab", E);
        init.norm(name + ".ln_tab_ff", E);
        init.norm(name + ".ln_img_ff", E);
        init.feed_forward(name + ".ff_tab", E);
        init.feed_forward(name + ".ff_img", E);
    }

    init.dense("risk", 1, 2 * E, false);
    return params;
}

AttentionWeights attention_weights(const ModelParams& p, const std::string& prefix) {
    AttentionWeights w;
    w.wq = p.at(prefix + ".wq");
    w.bq = p.at(prefix + ".bq");
    w.wk = p.at(prefix + ".wk");
    w.bk = p.at(prefix + ".bk");
    w.wv = p.at(prefix + ".wv");
    w.bv = p.at(prefix + ".bv");
    w.wo = p.at(prefix + ".wo");
    w.bo = p.at(prefix + ".bo");
    if (p.contains(prefix + ".proj_k")) {
        w.proj_k = p.at(prefix + ".proj_k");
        w.proj_v = p.at(prefix + ".proj_v");
    }
    return w;
}

Tensor positional_encoding(std::size_t length, std::size_t width) {
    std::vector<double> pe(length * width);
    for (std::size_t pos = 0; pos < length; ++pos) {
        for (std::size_t i = 0; i < width; ++i) {
            const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(width));
            const double angle = static_cast<double>(pos) * freq;
            pe[pos * width + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    }
    return Tensor::from({length, width}, std::move(pe));
}

Tensor apply_mask(const Tensor& ct, const Tensor& mask) {
    if (ct.shape() != mask.shape()) {
        throw std::invalid_argument("apply_mask: ct " + shape_str(ct.shape()) + " vs mask " + shape_str(mask.shape()));
    }
    for (double m : mask.data()) {
        if (m != 0.0 && m != 1.0) throw std::invalid_argument("apply_mask: mask is not binary");
    }
    return mul(ct, mask);
}

EncodeOutput encode(const Tensor& gtv, const ModelParams& p, const ModelConfig& cfg) {
    check_volume(gtv, 1, cfg.input_shape, "encode");
    EncodeOutput out;
    Tensor x = relu(conv(gtv, p, "enc.stem", 1, 1));
    for (std::size_t s = 1; s <= cfg.n_stages; ++s) {
        const auto name = stage_name("enc", s);
        x = down_block(x, p, name);
        out.intermediates[s - 1] = conv(x, p, name + ".proj", 1, 0);
    }
    out.bottleneck = x;
    return out;
}

Tensor bottleneck_attend(const Tensor& bottleneck, const ModelParams& p, const ModelConfig& cfg) {
    if (bottleneck.rank() != 4) {
        throw std::invalid_argument("bottleneck_attend: expected [C,H,W,D], got " + shape_str(bottleneck.shape()));
    }
    const std::size_t C = bottleneck.dim(0);
    const std::array<std::size_t, 3> ext{bottleneck.dim(1), bottleneck.dim(2), bottleneck.dim(3)};
    std::array<std::size_t, 3> win{}, count{};
    for (int a = 0; a < 3; ++a) {
        win[a] = std::min(cfg.window, ext[a]);
        count[a] = (ext[a] + win[a] - 1) / win[a];
    }
    const std::size_t tokens_per_window = win[0] * win[1] * win[2];
    const std::size_t n_windows = count[0] * count[1] * count[2];

    // Partition into non-overlapping windows; tokens outside the volume are zero padding.
    std::vector<std::int64_t> to_windows(n_windows * tokens_per_window * C);
    std::vector<std::int64_t> from_windows(bottleneck.numel());
    std::size_t row = 0;
    for (std::size_t wx = 0; wx < count[0]; ++wx)
        for (std::size_t wy = 0; wy < count[1]; ++wy)
            for (std::size_t wz = 0; wz < count[2]; ++wz)
                for (std::size_t tx = 0; tx < win[0]; ++tx)
                    for (std::size_t ty = 0; ty < win[1]; ++ty)
                        for (std::size_t tz = 0; tz < win[2]; ++tz, ++row) {
                            const std::size_t x = wx * win[0] + tx, y = wy * win[1] + ty, z = wz * win[2] + tz;
                            const bool inside = x < ext[0] && y < ext[1] && z < ext[2];
                            for (std::size_t c = 0; c < C; ++c) {
                                const std::size_t voxel = ((c * ext[0] + x) * ext[1] + y) * ext[2] + z;
                                to_windows[row * C + c] = inside ? static_cast<std::int64_t>(voxel) : -1;
                                if (inside) from_windows[voxel] = static_cast<std::int64_t>(row * C + c);
                            }
                        }

    Tensor tokens = gather(bottleneck, std::move(to_windows), {n_windows * tokens_per_window, C});
    const auto w = attention_weights(p, "bottleneck.attn");
    std::vector<Tensor> windows = split(tokens, 0, std::vector<std::size_t>(n_windows, tokens_per_window));
    for (auto& t : windows) {
        Tensor n1 = norm(t, p, "bottleneck.ln_attn");
        t = add(t, multihead_attention(n1, n1, n1, w, cfg.heads));
        t = add(t, feed_forward(norm(t, p, "bottleneck.ln_ff"), p, "bottleneck.ff"));
    }
    Tensor merged = n_windows == 1 ? windows.front() : concat(windows, 0);
    return gather(merged, std::move(from_windows), bottleneck.shape());
}

std::array<Tensor, 3> mffsm(const std::array<Tensor, 3>& f, const ModelParams& p, const ModelConfig& cfg) {
    const std::size_t C = cfg.base_channels;
    std::vector<Tensor> flat;
    std::vector<std::size_t> lengths;
    for (std::size_t s = 0; s < 3; ++s) {
        if (f[s].rank() != 4 || f[s].dim(0) != C) {
            throw std::invalid_argument("mffsm: scale " + std::to_string(s + 1) + " has shape " +
                                        shape_str(f[s].shape()) + ", expected " + std::to_string(C) + " channels");
        }
        const std::size_t n = f[s].numel() / C;
        flat.push_back(reshape(f[s], {C, n}));
        lengths.push_back(n);
    }
    Tensor seq = transpose(concat(flat, 1));  // [L, C]
    const std::size_t L = seq.dim(0);
    const auto w = attention_weights(p, "mffsm.attn");
    if (w.proj_k && w.proj_k->dim(1) != L) {
        throw std::invalid_argument("mffsm: fused length " + std::to_string(L) + " does not match projection " +
                                    shape_str(w.proj_k->shape()));
    }
    Tensor attn_in = add(seq, positional_encoding(L, C));
    Tensor fused = add(seq, multihead_attention(attn_in, attn_in, attn_in, w, cfg.heads));
    auto parts = split(transpose(fused), 1, lengths);
    std::array<Tensor, 3> out;
    for (std::size_t s = 0; s < 3; ++s) out[s] = reshape(parts[s], f[s].shape());
    return out;
}

Tensor decode(const Tensor& bottleneck, const std::array<Tensor, 3>& fused, const ModelParams& p,
              const ModelConfig& cfg) {
    check_volume(bottleneck, stage_channels(cfg, cfg.n_stages), cfg.scale_extent(cfg.n_stages), "decode bottleneck");
    Tensor x = bottleneck;
    for (std::size_t s = cfg.n_stages; s >= 1; --s) {
        check_volume(fused[s - 1], cfg.base_channels, cfg.scale_extent(s), "decode skip");
        x = up_block(concat({x, fused[s - 1]}, 0), p, stage_name("dec", s));
    }
    return conv(x, p, "dec.out", 1, 0);
}

CoAttentionOutput cmifm(const std::vector<Tensor>& intermediates, const Tensor& tabular, const ModelParams& p,
                        const ModelConfig& cfg) {
    if (intermediates.size() != cfg.cmifm_steps) {
        throw std::invalid_argument("cmifm: expected " + std::to_string(cfg.cmifm_steps) + " scales, got " +
                                    std::to_string(intermediates.size()));
    }
    if (tabular.shape() != Shape{cfg.tabular_dim}) {
        throw std::invalid_argument("cmifm: tabular " + shape_str(tabular.shape()) + ", expected [" +
                                    std::to_string(cfg.tabular_dim) + "]");
    }
    const std::size_t E = cfg.embed_dim;
    Tensor tab = reshape(dense(tabular, p, "cmifm.tab_embed"), {1, E});
    Tensor img;
    for (std::size_t s = 0; s < intermediates.size(); ++s) {
        const auto& f = intermediates[s];
        Tensor pooled = mean_axis(reshape(f, {f.dim(0), f.numel() / f.dim(0)}), 1);
        Tensor token = reshape(dense(pooled, p, "cmifm.img_embed" + std::to_string(s + 1)), {1, E});
        std::tie(tab, img) = co_attention(tab, token, p, "cmifm.step" + std::to_string(s + 1), cfg.heads);
    }
    return {reshape(img, {E}), reshape(tab, {E})};
}

Tensor risk_head(const Tensor& f_img, const Tensor& f_tab, const ModelParams& p) {
    if (f_img.shape() != f_tab.shape() || f_img.rank() != 1) {
        throw std::invalid_argument("risk_head: f_img " + shape_str(f_img.shape()) + " vs f_tab " +
                                    shape_str(f_tab.shape()));
    }
    return reshape(linear(concat({f_img, f_tab}, 0), p.at("risk.w")), {});
}

ForwardOutput forward(const Tensor& ct, const Tensor& mask, const Tensor& tabular, const ModelParams& p,
                      const ModelConfig& cfg, const ModelVariant& variant) {
    Tensor gtv = apply_mask(ct, mask);
    EncodeOutput enc = encode(gtv, p, cfg);
    Tensor attended = bottleneck_attend(enc.bottleneck, p, cfg);
    auto fused = variant.use_mffsm ? mffsm(enc.intermediates, p, cfg) : enc.intermediates;

    ForwardOutput out;
    out.reconstruction = decode(attended, fused, p, cfg);
    out.intermediates = enc.intermediates;
    std::vector<Tensor> scales(enc.intermediates.begin(), enc.intermediates.end());
    if (variant.use_cmifm) {
        auto co = cmifm(scales, tabular, p, cfg);
        out.f_img = co.f_img;
        out.f_tab = co.f_tab;
    } else {
        // Without co-attention: mean of the per-scale image embeddings and the raw tabular embedding.
        if (tabular.shape() != Shape{cfg.tabular_dim}) {
            throw std::invalid_argument("forward: tabular " + shape_str(tabular.shape()) + ", expected [" +
                                        std::to_string(cfg.tabular_dim) + "]");
        }
        Tensor acc;
        for (std::size_t s = 0; s < scales.size(); ++s) {
            const auto& f = scales[s];
            Tensor pooled = mean_axis(reshape(f, {f.dim(0), f.numel() / f.dim(0)}), 1);
            Tensor token = dense(pooled, p, "cmifm.img_embed" + std::to_string(s + 1));
            acc = s == 0 ? token : add(acc, token);
        }
        out.f_img = scale(acc, 1.0 / static_cast<double>(scales.size()));
        out.f_tab = dense(tabular, p, "cmifm.tab_embed");
    }
    out.risk = risk_head(out.f_img, out.f_tab, p);
    return out;
}

}  // namespace mifi::model
