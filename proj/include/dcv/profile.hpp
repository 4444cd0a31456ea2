#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dcv/encoder.hpp"
#include "dcv/image.hpp"

namespace dcv {

/// Per-layer mean over `images` of the layer's MSA direct effect on the
/// class-token embedding, [L, J]. Throws ArgumentError on an empty set.
Tensor compute_mean_effects(const ModelParams& params, std::span<const Image* const> images);

/// Zero-shot accuracy with the MSA direct effects of layers 1..l replaced by
/// `means`, for l = 0..L. Entry 0 is the unablated accuracy. `class_embs` are
/// row-normalized prompt embeddings.
std::vector<double> accumulated_ablation_curve(const ModelParams& params, std::span<const Image* const> images,
                                               std::span<const std::size_t> labels, const Tensor& class_embs,
                                               const Tensor& means);

/// delta_l = max(0, curve[l-1] - curve[l]) for l = 1..L.
std::vector<double> curve_deltas(std::span<const double> curve);

/// w_l = delta_l / sum(delta). Throws DegenerateProfileError when every
/// delta is zero (after clamping negatives).
std::vector<double> layer_weights(std::span<const double> deltas);

struct AblationProfile {
    Tensor means;  // [L, J]
    std::vector<double> curve;
    std::vector<double> deltas;
    std::vector<double> weights;
    bool uniform_fallback = false;
};

/// Means on `reference`, curve on `eval`. With `fallback_uniform`, a flat
/// profile gets uniform weights instead of throwing.
AblationProfile profile_model(const ModelParams& params, std::span<const Image* const> reference,
                              std::span<const Image* const> eval, std::span<const std::size_t> labels,
                              const Tensor& class_embs, bool fallback_uniform);

/// Columns l, accuracy, delta, weight (row 0 has empty delta and weight).
std::string ablation_csv(const AblationProfile& p);
/// profile.json + profile.bin in `dir`.
void save_profile(const AblationProfile& p, const std::filesystem::path& dir);
AblationProfile load_profile(const std::filesystem::path& dir);

} // namespace dcv
