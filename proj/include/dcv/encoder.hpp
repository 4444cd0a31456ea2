#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dcv/image.hpp"
#include "dcv/rng.hpp"
#include "dcv/tensor.hpp"
#include "dcv/tokenizer.hpp"

namespace dcv {

struct EncoderConfig {
    std::size_t layers = 4;       // L
    std::size_t heads = 4;        // M
    std::size_t width = 64;       // d
    std::size_t patch_size = 8;
    std::size_t image_side = 32;
    std::size_t channels = 3;
    std::size_t joint_dim = 32;
    std::size_t mlp_ratio = 4;
    std::size_t vocab_size = 1;
    std::size_t text_len = 16;
    std::size_t text_layers = 2;
    double ln_eps = 1e-5;

    /// Spatial tokens N = (image_side / patch_size)^2.
    std::size_t patches() const { return grid() * grid(); }
    std::size_t grid() const { return image_side / patch_size; }
    /// Class token plus spatial tokens.
    std::size_t tokens() const { return patches() + 1; }
    std::size_t head_dim() const { return width / heads; }
    std::size_t patch_dim() const { return patch_size * patch_size * channels; }

    /// Throws ConfigError when an extent is zero or a divisibility rule fails.
    void validate() const;
    bool operator==(const EncoderConfig&) const = default;
};

/// Named parameter tensors of both encoders plus the logit scale, in a fixed
/// registration order (the checkpoint order).
class ModelParams {
public:
    ModelParams() = default;
    explicit ModelParams(EncoderConfig config) : config_(std::move(config)) {}

    const EncoderConfig& config() const noexcept { return config_; }

    void add(std::string name, Tensor value);
    const Tensor& get(std::string_view name) const;
    Tensor& get(std::string_view name);
    bool contains(std::string_view name) const;

    std::size_t size() const noexcept { return entries_.size(); }
    const std::string& name(std::size_t i) const { return entries_[i].first; }
    const Tensor& at(std::size_t i) const { return entries_[i].second; }
    Tensor& at(std::size_t i) { return entries_[i].second; }

    std::size_t parameter_count() const;
    bool bitwise_equal(const ModelParams& other) const;

private:
    EncoderConfig config_;
    std::vector<std::pair<std::string, Tensor>> entries_;
    std::map<std::string, std::size_t, std::less<>> index_;
};

/// Name/shape list of every parameter for `config`, in registration order.
std::vector<std::pair<std::string, Shape>> parameter_layout(const EncoderConfig& config);

ModelParams init_params(const EncoderConfig& config, Rng& rng, double temperature = 0.07);

struct Embedding {
    Tensor vector;  // [joint_dim]
    bool normalized = false;

    Embedding normalized_copy() const;
};

/// Exact additive split of one image embedding (before normalization).
struct ResidualLedger {
    Tensor input_term;  // [J]: class token + its position, plus the final layernorm bias
    Tensor msa_terms;   // [L, M, N + 1, J]: head m of layer l attending to token i
    Tensor mlp_terms;   // [L, J]: class-token MLP output of each layer

    std::size_t layers() const { return msa_terms.shape()[0]; }
    std::size_t heads() const { return msa_terms.shape()[1]; }
    std::size_t tokens() const { return msa_terms.shape()[2]; }
    std::size_t joint_dim() const { return msa_terms.shape()[3]; }

    /// input_term + all msa_terms + all mlp_terms.
    Tensor total() const;
    /// Layer l's MSA direct effect summed over heads and tokens, [J].
    Tensor layer_msa(std::size_t layer) const;
};

/// Activations of one batched image forward pass that the attribution needs.
/// Tensors stay linked to the active tape, if any.
struct VisualTrace {
    Tensor embedding;                 // [B, J], before normalization
    Tensor cls_final;                 // [B, d], class token entering the final layernorm
    Tensor cls_input;                 // [B, d], class token + position
    std::vector<Tensor> attention;    // per layer [B, M, T, T]
    std::vector<Tensor> values;       // per layer [B, M, T, d/M]
    std::vector<Tensor> mlp_cls;      // per layer [B, d]
};

/// Patch rows of a batch of images, [B, N, patch_dim]. Throws ConfigError on
/// size mismatch and ArgumentError on pixels outside [0, 1].
Tensor patchify(const EncoderConfig& config, std::span<const Image> images);

VisualTrace visual_forward(const ModelParams& params, const Tensor& patches);

/// Layer-weighted, head-summed token contributions e_i in joint space, [B, T, J].
/// Differentiable through the recorded trace. Matches the ledger route exactly
/// up to floating-point reassociation.
Tensor weighted_token_contributions(const ModelParams& params, const VisualTrace& trace,
                                    std::span<const double> layer_weights);

/// Per-head ledger for batch entry `index` (values only, never recorded).
ResidualLedger build_ledger(const ModelParams& params, const VisualTrace& trace, std::size_t index);

struct ImageEncoding {
    Embedding embedding;  // unnormalized
    std::optional<ResidualLedger> ledger;
};

ImageEncoding encode_image(const Image& image, const ModelParams& params, bool record_ledger);
std::vector<ImageEncoding> encode_images(std::span<const Image> images, const ModelParams& params,
                                         bool record_ledger, std::size_t batch_size = 64);

/// Unnormalized text embeddings, [texts.size(), J]. Sequences of equal length
/// are batched together; output rows follow input order.
Tensor encode_texts(const ModelParams& params, std::span<const TokenIds> texts);
Embedding encode_text(const TokenIds& ids, const ModelParams& params);

} // namespace dcv
