#pragma once

// Masked-volume autoencoder with a windowed-attention bottleneck, multi-scale
// fusion-separation before decoding, and chained cross-modal co-attention
// feeding a linear risk head.
//
//   ct, mask -> apply_mask -> encode -> bottleneck_attend -> decode -> reconstruction
//                               |  F1..F3 -> mffsm ---------------^
//                               |  F1..F3 + tabular -> cmifm -> (f_img, f_tab) -> risk_head

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mifi/tensor.hpp"

namespace mifi::model {

struct ModelConfig {
    std::array<std::size_t, 3> input_shape{16, 16, 16};
    std::size_t base_channels = 4;
    std::size_t n_stages = 3;
    std::size_t tabular_dim = 8;
    std::size_t embed_dim = 32;
    // Shared by every attention block; must divide base_channels and embed_dim.
    std::size_t heads = 4;
    std::size_t window = 2;
    std::size_t linformer_k = 16;
    std::size_t cmifm_steps = 3;
    std::uint64_t seed = 0;

    /// Throws std::invalid_argument naming the offending key.
    void validate() const;

    // Spatial extents of F_i, i = 1..n_stages.
    std::array<std::size_t, 3> scale_extent(std::size_t stage) const;
    /// Tokens in the fused multi-scale sequence.
    std::size_t fused_length() const;

    std::string to_text() const;
    static ModelConfig from_text(const std::string& text);

    bool operator==(const ModelConfig&) const = default;
};

/// Named trainable tensors, iterated in name order.
class ModelParams {
   public:
    void add(const std::string& name, Tensor t);
    const Tensor& at(const std::string& name) const;
    Tensor& at(const std::string& name);
    bool contains(const std::string& name) const { return params_.count(name) > 0; }
    std::size_t size() const { return params_.size(); }
    std::size_t scalar_count() const;

    std::vector<std::string> names() const;
    std::vector<Tensor> tensors() const;
    void zero_grad();

    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    void save(const std::filesystem::path& path) const;
    static ModelParams load(const std::filesystem::path& path);

   private:
    std::map<std::string, Tensor> params_;
};

ModelParams init_params(const ModelConfig& cfg);

/// Writes `MIFI`, version, then (name, rank, extents, float64 payload) records, all little-endian.
void save_tensor_archive(const std::filesystem::path& path,
                         const std::vector<std::pair<std::string, Tensor>>& entries);
std::vector<std::pair<std::string, Tensor>> load_tensor_archive(const std::filesystem::path& path);

struct EncodeOutput {
    Tensor bottleneck;                  // [8C, H/8, W/8, D/8]
    std::array<Tensor, 3> intermediates;  // F_i: [C, H/2^i, W/2^i, D/2^i]
};

struct CoAttentionOutput {
    Tensor f_img;  // [E]
    Tensor f_tab;  // [E]
};

struct ForwardOutput {
    Tensor reconstruction;  // [1, H, W, D]
    Tensor risk;            // scalar
    Tensor f_img;
    Tensor f_tab;
    std::array<Tensor, 3> intermediates;
};

/// Ablation switches; the defaults give the full model.
struct ModelVariant {
    bool use_mffsm = true;
    bool use_cmifm = true;
};

Tensor apply_mask(const Tensor& ct, const Tensor& mask);
EncodeOutput encode(const Tensor& gtv, const ModelParams& params, const ModelConfig& cfg);
Tensor bottleneck_attend(const Tensor& bottleneck, const ModelParams& params, const ModelConfig& cfg);
std::array<Tensor, 3> mffsm(const std::array<Tensor, 3>& intermediates, const ModelParams& params,
                            const ModelConfig& cfg);
Tensor decode(const Tensor& bottleneck, const std::array<Tensor, 3>& fused, const ModelParams& params,
              const ModelConfig& cfg);
CoAttentionOutput cmifm(const std::vector<Tensor>& intermediates, const Tensor& tabular,
                        const ModelParams& params, const ModelConfig& cfg);
Tensor risk_head(const Tensor& f_img, const Tensor& f_tab, const ModelParams& params);

ForwardOutput forward(const Tensor& ct, const Tensor& mask, const Tensor& tabular, const ModelParams& params,
                      const ModelConfig& cfg, const ModelVariant& variant = {});

/// Fixed sinusoidal encoding [length, width] over the flattened sequence index.
Tensor positional_encoding(std::size_t length, std::size_t width);

/// Collects the attention block registered under `prefix` (e.g. "mffsm.attn").
AttentionWeights attention_weights(const ModelParams& params, const std::string& prefix);

}  // namespace mifi::model
