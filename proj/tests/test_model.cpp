#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "gradcheck.hpp"
#include "mifi/losses.hpp"
#include "mifi/model.hpp"
#include "oracles.hpp"

using namespace mifi;
using namespace mifi::model;
namespace mt = mifi::testing;

namespace {

ModelConfig small_config() {
    ModelConfig cfg;
    cfg.input_shape = {8, 8, 8};
    cfg.base_channels = 2;
    cfg.tabular_dim = 4;
    cfg.embed_dim = 8;
    cfg.heads = 2;
    cfg.window = 2;
    cfg.linformer_k = 4;
    cfg.seed = 3;
    return cfg;
}

Tensor volume(const ModelConfig& cfg, Rng& rng) {
    const auto [h, w, d] = cfg.input_shape;
    return mt::random_tensor({1, h, w, d}, rng);
}

Tensor binary_mask(const ModelConfig& cfg, Rng& rng) {
    const auto [h, w, d] = cfg.input_shape;
    std::bernoulli_distribution coin(0.6);
    std::vector<double> v(h * w * d);
    for (auto& x : v) x = coin(rng) ? 1.0 : 0.0;
    return Tensor::from({1, h, w, d}, std::move(v));
}

// Closed-form parameter count written independently of init_params.
std::size_t expected_param_count(const ModelConfig& cfg) {
    const std::size_t C = cfg.base_channels, E = cfg.embed_dim, T = cfg.tabular_dim;
    const std::size_t B = C << cfg.n_stages;
    auto conv = [](std::size_t co, std::size_t ci, std::size_t k) { return co * ci * k * k * k + co; };
    std::size_t n = conv(C, 1, 3);
    for (std::size_t s = 1; s <= cfg.n_stages; ++s) {
        const std::size_t ci = C << (s - 1), co = C << s;
        n += conv(co, ci, 3) + conv(co, co, 3) + conv(co, ci, 1) + conv(C, co, 1);
    }
    auto attn = [](std::size_t w) { return 4 * (w * w + w); };
    auto ff = [](std::size_t w) { return 2 * w * w + 2 * w + 2 * w * w + w; };
    n += 4 * B + attn(B) + ff(B);
    n += attn(C) + 2 * cfg.linformer_k * cfg.fused_length();
    for (std::size_t s = 1; s <= cfg.n_stages; ++s) {
        const std::size_t ci = (C << s) + C, co = C << (s - 1);
        n += conv(co, ci, 3) + conv(co, co, 3) + conv(co, ci, 1);
    }
    n += conv(1, C, 1);
    n += E * T + E + cfg.n_stages * (E * C + E);
    n += cfg.cmifm_steps * (8 * E + 2 * attn(E) + 2 * ff(E));
    n += 2 * E;
    return n;
}

std::vector<double> to_vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

void expect_near_all(const Tensor& a, const Tensor& b, double tol) {
    ASSERT_EQ(a.shape(), b.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], tol) << "at " << i;
}

}  // namespace

TEST(ModelConfig, ValidateRejectsBadValues) {
    ModelConfig cfg;
    EXPECT_NO_THROW(cfg.validate());
    auto bad = cfg;
    bad.input_shape = {12, 16, 16};
    EXPECT_THROW(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.heads = 3;
    EXPECT_THROW(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.n_stages = 2;
    EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(ModelConfig, TextRoundTrip) {
    auto cfg = small_config();
    cfg.input_shape = {32, 32, 16};
    EXPECT_EQ(ModelConfig::from_text(cfg.to_text()), cfg);
    EXPECT_THROW(ModelConfig::from_text("bogus = 1\n"), std::invalid_argument);
    EXPECT_THROW(ModelConfig::from_text("embed_dim = 8x\n"), std::invalid_argument);
}

TEST(ModelConfig, FusedLengthDefault) {
    ModelConfig cfg;
    EXPECT_EQ(cfg.fused_length(), 512u + 64u + 8u);
}

TEST(Model, ParameterCountMatchesClosedForm) {
    for (auto cfg : {ModelConfig{}, small_config()}) {
        const auto params = init_params(cfg);
        EXPECT_EQ(params.scalar_count(), expected_param_count(cfg));
    }
    auto wide = ModelConfig{};
    wide.input_shape = {32, 32, 16};
    EXPECT_EQ(init_params(wide).scalar_count(), expected_param_count(wide));
}

TEST(Model, ApplyMask) {
    Rng rng(1);
    auto cfg = small_config();
    Tensor ct = volume(cfg, rng);
    const auto [h, w, d] = cfg.input_shape;
    expect_near_all(apply_mask(ct, Tensor::full({1, h, w, d}, 1.0)), ct, 0.0);
    Tensor cleared = apply_mask(ct, Tensor::zeros({1, h, w, d}));
    for (double v : cleared.data()) EXPECT_EQ(v, 0.0);
    Tensor m = binary_mask(cfg, rng);
    Tensor out = apply_mask(ct, m);
    for (std::size_t i = 0; i < ct.numel(); ++i) EXPECT_EQ(out.data()[i], ct.data()[i] * m.data()[i]);
    Tensor half = Tensor::full({1, h, w, d}, 0.5);
    EXPECT_THROW(apply_mask(ct, half), std::invalid_argument);
    EXPECT_THROW(apply_mask(ct, Tensor::zeros({1, h, w, d / 2})), std::invalid_argument);
}

TEST(Model, EncodeShapes16) {
    ModelConfig cfg;
    const auto params = init_params(cfg);
    Rng rng(2);
    auto enc = encode(volume(cfg, rng), params, cfg);
    EXPECT_EQ(enc.intermediates[0].shape(), (Shape{4, 8, 8, 8}));
    EXPECT_EQ(enc.intermediates[1].shape(), (Shape{4, 4, 4, 4}));
    EXPECT_EQ(enc.intermediates[2].shape(), (Shape{4, 2, 2, 2}));
    EXPECT_EQ(enc.bottleneck.shape(), (Shape{32, 2, 2, 2}));
}

TEST(Model, EncodeZeroInputGivesZeroFeatures) {
    ModelConfig cfg;
    const auto params = init_params(cfg);
    auto enc = encode(Tensor::zeros({1, 16, 16, 16}), params, cfg);
    for (const auto& f : enc.intermediates)
        for (double v : f.data()) EXPECT_EQ(v, 0.0);
    for (double v : enc.bottleneck.data()) EXPECT_EQ(v, 0.0);
}

TEST(Model, ForwardShapesSeveralConfigs) {
    std::vector<ModelConfig> configs{ModelConfig{}, small_config()};
    configs.emplace_back();
    configs.back().input_shape = {32, 32, 16};
    Rng rng(4);
    for (const auto& cfg : configs) {
        const auto params = init_params(cfg);
        Tensor ct = volume(cfg, rng);
        Tensor tab = mt::random_tensor({cfg.tabular_dim}, rng);
        auto out = forward(ct, binary_mask(cfg, rng), tab, params, cfg);
        EXPECT_EQ(out.reconstruction.shape(), ct.shape());
        EXPECT_EQ(out.risk.rank(), 0u);
        EXPECT_EQ(out.f_img.shape(), Shape{cfg.embed_dim});
        EXPECT_EQ(out.f_tab.shape(), Shape{cfg.embed_dim});
        auto fused = mffsm(out.intermediates, params, cfg);
        for (std::size_t s = 0; s < 3; ++s) EXPECT_EQ(fused[s].shape(), out.intermediates[s].shape());
    }
}

TEST(Model, MffsmMarkerPropagation) {
    ModelConfig cfg;
    auto params = init_params(cfg);
    for (const char* name : {"mffsm.attn.wv", "mffsm.attn.bv"}) {
        for (auto& v : params.at(name).mutable_data()) v = 0.0;
    }
    std::vector<double> bias(cfg.base_channels);
    for (std::size_t c = 0; c < bias.size(); ++c) bias[c] = 0.01 * static_cast<double>(c + 1);
    std::copy(bias.begin(), bias.end(), params.at("mffsm.attn.bo").mutable_data().begin());

    const double markers[3] = {1.0, 20.0, 300.0};
    std::array<Tensor, 3> f;
    for (std::size_t s = 0; s < 3; ++s) {
        const auto e = cfg.scale_extent(s + 1);
        f[s] = Tensor::full({cfg.base_channels, e[0], e[1], e[2]}, markers[s]);
    }
    auto out = mffsm(f, params, cfg);
    for (std::size_t s = 0; s < 3; ++s) {
        ASSERT_EQ(out[s].shape(), f[s].shape());
        const std::size_t per_channel = out[s].numel() / cfg.base_channels;
        for (std::size_t i = 0; i < out[s].numel(); ++i) {
            EXPECT_NEAR(out[s].data()[i], markers[s] + bias[i / per_channel], 1e-12) << "scale " << s + 1;
        }
    }
}

TEST(Model, MffsmRejectsChannelMismatch) {
    ModelConfig cfg;
    const auto params = init_params(cfg);
    std::array<Tensor, 3> f{Tensor::zeros({4, 8, 8, 8}), Tensor::zeros({3, 4, 4, 4}), Tensor::zeros({4, 2, 2, 2})};
    EXPECT_THROW(mffsm(f, params, cfg), std::invalid_argument);
}

TEST(Model, BottleneckWindowCoveringExtentEqualsFullAttention) {
    Rng rng(5);
    for (std::size_t window : {2u, 4u, 16u}) {
        ModelConfig cfg;
        cfg.window = window;
        const auto params = init_params(cfg);
        Tensor x = mt::random_tensor({32, 2, 2, 2}, rng);
        expect_near_all(bottleneck_attend(x, params, cfg), mifi::oracle::full_attention_block(x, params, cfg), 1e-10);
    }
    ModelConfig wide;
    wide.input_shape = {32, 32, 16};
    wide.window = 4;
    const auto params = init_params(wide);
    Tensor x = mt::random_tensor({32, 4, 4, 2}, rng);
    expect_near_all(bottleneck_attend(x, params, wide), mifi::oracle::full_attention_block(x, params, wide), 1e-10);
}

TEST(Model, BottleneckWindowsAreIndependent) {
    // window 1: every voxel is its own window, so perturbing one voxel leaves the others untouched.
    ModelConfig cfg;
    cfg.window = 1;
    const auto params = init_params(cfg);
    Rng rng(6);
    Tensor x = mt::random_tensor({32, 2, 2, 2}, rng);
    Tensor base = bottleneck_attend(x, params, cfg);
    Tensor y = x.clone();
    y.mutable_data()[0] += 1.0;  // channel 0 of voxel 0
    Tensor moved = bottleneck_attend(y, params, cfg);
    for (std::size_t c = 0; c < 32; ++c)
        for (std::size_t v = 1; v < 8; ++v) EXPECT_EQ(moved.data()[c * 8 + v], base.data()[c * 8 + v]);
}

TEST(Model, BottleneckPadsRemainders) {
    ModelConfig cfg;
    cfg.window = 2;
    const auto params = init_params(cfg);
    Rng rng(7);
    Tensor x = mt::random_tensor({32, 3, 2, 3}, rng);
    EXPECT_EQ(bottleneck_attend(x, params, cfg).shape(), x.shape());
}

TEST(Model, BottleneckGradientCheck) {
    auto cfg = small_config();
    auto params = init_params(cfg);
    Rng rng(8);
    Tensor x = mt::random_tensor({16, 1, 1, 1}, rng);
    Tensor proj = mt::random_tensor({16, 1, 1, 1}, rng);
    std::vector<Tensor> inputs{x};
    std::vector<std::string> names{"x"};
    for (const auto& [name, t] : params) {
        if (name.rfind("bottleneck.", 0) == 0) {
            inputs.push_back(t);
            names.push_back(name);
        }
    }
    auto f = [&] { return sum(mul(bottleneck_attend(x, params, cfg), proj)); };
    for (const auto& r : mt::grad_check(f, inputs, 1e-5, names)) EXPECT_LT(r.rel_error, 1e-4) << r.name;
}

TEST(Model, DecodeShapeAndGradient) {
    auto cfg = small_config();
    auto params = init_params(cfg);
    Rng rng(9);
    Tensor b = mt::random_tensor({16, 1, 1, 1}, rng);
    std::array<Tensor, 3> fused;
    for (std::size_t s = 0; s < 3; ++s) {
        const auto e = cfg.scale_extent(s + 1);
        fused[s] = mt::random_tensor({2, e[0], e[1], e[2]}, rng);
    }
    EXPECT_EQ(decode(b, fused, params, cfg).shape(), (Shape{1, 8, 8, 8}));
    Tensor proj = mt::random_tensor({1, 8, 8, 8}, rng);
    std::vector<Tensor> inputs{b, fused[0], fused[1], fused[2], params.at("dec.s1.conv1.w"), params.at("dec.out.w")};
    auto f = [&] { return sum(mul(decode(b, fused, params, cfg), proj)); };
    for (const auto& r : mt::grad_check(f, inputs)) EXPECT_LT(r.rel_error, 1e-4) << r.name;
}

TEST(Model, CmifmTabularChainWithSilencedImagePath) {
    auto cfg = small_config();
    auto params = init_params(cfg);
    for (std::size_t step = 1; step <= 3; ++step) {
        const auto prefix = "cmifm.step" + std::to_string(step) + ".tab_from_img.";
        for (const char* w : {"wv", "bv", "bo"})
            for (auto& v : params.at(prefix + w).mutable_data()) v = 0.0;
    }
    Rng rng(10);
    Tensor tab = mt::random_tensor({4}, rng);

    // Tabular-only chain: T <- T + FF(LN(T)) per step.
    auto p = [&](const std::string& n) { return params.at(n); };
    Tensor t = linear(tab, p("cmifm.tab_embed.w"), p("cmifm.tab_embed.b"));
    for (std::size_t step = 1; step <= 3; ++step) {
        const auto s = "cmifm.step" + std::to_string(step);
        Tensor n = layer_norm(t, p(s + ".ln_tab_ff.g"), p(s + ".ln_tab_ff.b"));
        Tensor h = relu(linear(n, p(s + ".ff_tab.fc1.w"), p(s + ".ff_tab.fc1.b")));
        t = add(t, linear(h, p(s + ".ff_tab.fc2.w"), p(s + ".ff_tab.fc2.b")));
    }

    for (double fill : {0.0, 1.5}) {
        std::vector<Tensor> f;
        for (std::size_t s = 1; s <= 3; ++s) {
            const auto e = cfg.scale_extent(s);
            f.push_back(fill == 0.0 ? Tensor::zeros({2, e[0], e[1], e[2]}) : mt::random_tensor({2, e[0], e[1], e[2]}, rng, fill));
        }
        auto out = cmifm(f, tab, params, cfg);
        EXPECT_EQ(out.f_img.shape(), Shape{8});
        expect_near_all(out.f_tab, t, 1e-12);
    }
}

TEST(Model, CmifmRejectsWrongScaleCount) {
    auto cfg = small_config();
    const auto params = init_params(cfg);
    std::vector<Tensor> f{Tensor::zeros({2, 4, 4, 4}), Tensor::zeros({2, 2, 2, 2})};
    EXPECT_THROW(cmifm(f, Tensor::zeros({4}), params, cfg), std::invalid_argument);
}

TEST(Model, RiskHeadLinearity) {
    auto cfg = small_config();
    auto params = init_params(cfg);
    Rng rng(11);
    Tensor a = mt::random_tensor({8}, rng), b = mt::random_tensor({8}, rng);
    const double r1 = risk_head(a, b, params).item();
    for (auto& w : params.at("risk.w").mutable_data()) w *= 2.0;
    EXPECT_NEAR(risk_head(a, b, params).item(), 2.0 * r1, 1e-12);
    for (auto& w : params.at("risk.w").mutable_data()) w = 0.0;
    EXPECT_EQ(risk_head(a, b, params).item(), 0.0);
    EXPECT_THROW(risk_head(a, Tensor::zeros({7}), params), std::invalid_argument);
}

TEST(Model, BatchPermutationPurity) {
    auto cfg = small_config();
    const auto params = init_params(cfg);
    Rng rng(12);
    std::vector<Tensor> ct, mask, tab;
    for (int i = 0; i < 3; ++i) {
        ct.push_back(volume(cfg, rng));
        mask.push_back(binary_mask(cfg, rng));
        tab.push_back(mt::random_tensor({4}, rng));
    }
    auto risks = [&](const std::vector<std::size_t>& order) {
        std::vector<double> r;
        for (auto i : order) r.push_back(forward(ct[i], mask[i], tab[i], params, cfg).risk.item());
        return r;
    };
    const auto base = risks({0, 1, 2});
    const auto perm = risks({2, 0, 1});
    EXPECT_EQ(perm[0], base[2]);
    EXPECT_EQ(perm[1], base[0]);
    EXPECT_EQ(perm[2], base[1]);
}

TEST(Model, DeterministicForward) {
    auto cfg = small_config();
    Rng rng(13);
    Tensor ct = volume(cfg, rng), m = binary_mask(cfg, rng), tab = mt::random_tensor({4}, rng);
    auto a = forward(ct, m, tab, init_params(cfg), cfg);
    auto b = forward(ct, m, tab, init_params(cfg), cfg);
    EXPECT_EQ(to_vec(a.reconstruction), to_vec(b.reconstruction));
    EXPECT_EQ(a.risk.item(), b.risk.item());
    EXPECT_EQ(to_vec(a.f_img), to_vec(b.f_img));
    EXPECT_EQ(to_vec(a.f_tab), to_vec(b.f_tab));
    cfg.seed += 1;
    EXPECT_NE(forward(ct, m, tab, init_params(cfg), cfg).risk.item(), a.risk.item());
}

TEST(Model, AblatedForwardDiffers) {
    auto cfg = small_config();
    const auto params = init_params(cfg);
    Rng rng(14);
    Tensor ct = volume(cfg, rng), m = binary_mask(cfg, rng), tab = mt::random_tensor({4}, rng);
    auto full = forward(ct, m, tab, params, cfg);
    auto no_mffsm = forward(ct, m, tab, params, cfg, {.use_mffsm = false});
    auto no_cmifm = forward(ct, m, tab, params, cfg, {.use_cmifm = false});
    EXPECT_NE(to_vec(full.reconstruction), to_vec(no_mffsm.reconstruction));
    EXPECT_EQ(full.risk.item(), no_mffsm.risk.item());
    EXPECT_NE(full.risk.item(), no_cmifm.risk.item());
}

TEST(Model, CheckpointRoundTrip) {
    auto cfg = small_config();
    const auto params = init_params(cfg);
    const auto dir = std::filesystem::temp_directory_path() / "mifi_test_ckpt";
    std::filesystem::create_directories(dir);
    const auto path = dir / "params.mifi";
    params.save(path);
    const auto loaded = ModelParams::load(path);
    ASSERT_EQ(loaded.names(), params.names());
    for (const auto& [name, t] : params) {
        EXPECT_EQ(loaded.at(name).shape(), t.shape());
        EXPECT_EQ(to_vec(loaded.at(name)), to_vec(t)) << name;
    }
    const auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size - 3);
    EXPECT_THROW(ModelParams::load(path), std::runtime_error);
    {
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        os << "NOPE";
    }
    EXPECT_THROW(ModelParams::load(path), std::runtime_error);
    std::filesystem::remove_all(dir);
}

TEST(Model, AutoencoderOverfitsSingleVolume) {
    auto cfg = small_config();
    cfg.base_channels = 4;
    cfg.heads = 2;
    auto params = init_params(cfg);
    Rng rng(15);
    // Smooth blob on a ramp, the kind of structure a tumour volume has.
    std::vector<double> v(512);
    for (std::size_t i = 0; i < 512; ++i) {
        const double x = static_cast<double>(i / 64), y = static_cast<double>(i / 8 % 8), z = static_cast<double>(i % 8);
        const double r2 = (x - 3.2) * (x - 3.2) + (y - 4.1) * (y - 4.1) + (z - 3.7) * (z - 3.7);
        v[i] = std::exp(-r2 / 6.0) + 0.05 * x;
    }
    Tensor ct = Tensor::from({1, 8, 8, 8}, v);
    Tensor m = Tensor::full({1, 8, 8, 8}, 1.0);
    Tensor tab = mt::random_tensor({4}, rng);
    Tensor gtv = apply_mask(ct, m);
    auto tensors = params.tensors();
    AdamState state;
    AdamConfig opt;
    opt.lr = 3e-3;
    double first = 0.0, last = 0.0;
    for (int step = 0; step < 500; ++step) {
        params.zero_grad();
        auto out = forward(ct, m, tab, params, cfg);
        Tensor loss = losses::reconstruction_loss(gtv, out.reconstruction);
        if (step == 0) first = loss.item();
        last = loss.item();
        if (last < 0.01 * first) break;
        backward(loss);
        adam_step(tensors, state, opt);
    }
    EXPECT_LT(last, 0.01 * first) << "initial " << first;
}
