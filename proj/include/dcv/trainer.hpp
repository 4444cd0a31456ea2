#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dcv/encoder.hpp"
#include "dcv/image.hpp"
#include "dcv/rng.hpp"
#include "dcv/tokenizer.hpp"

namespace dcv {

struct TrainerConfig {
    double lambda = 0.5;   // disentanglement multiplier
    double gamma = 0.5;    // reconstruction multiplier
    double epsilon = 0.5;  // disentanglement margin
    double delta = 0.5;    // reconstruction margin
    std::optional<double> fixed_tau;  // empty: per-heatmap mu + sigma
    double temperature = 0.07;
    double learning_rate = 3e-4;
    double warmup_fraction = 0.1;
    double weight_decay = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double adam_eps = 1e-6;
    std::size_t epochs = 8;
    std::size_t batch_size = 32;
    std::size_t pairs_per_step = 6;  // used when K > 4; all pairs otherwise
    std::uint64_t seed = 0;
    std::vector<double> layer_weights;  // empty: uniform

    /// Throws ConfigError.
    void validate() const;
};

struct LossBreakdown {
    double infonce = 0.0;
    double disen_penalty = 0.0;
    double recon_penalty = 0.0;
    double total = 0.0;
};

/// One training image with its text. `captions` holds the InfoNCE text
/// options; one is drawn per epoch.
struct TrainExample {
    std::string id;
    const Image* image = nullptr;
    std::vector<TokenIds> captions;
    TokenIds category;
    std::vector<TokenIds> rationales;
};

/// Symmetric InfoNCE over a [B, J] pair of row-normalized embeddings.
/// Throws ArgumentError when a row is not unit length.
Tensor infonce(const Tensor& image_embs, const Tensor& text_embs, double temperature);

/// Mean over `pairs` of max(0, epsilon - ||h_r - h_r'||) for h = [K, J].
/// With fewer than two rationales returns 0 and logs a warning.
Tensor disentanglement_penalty(const Tensor& h, double epsilon,
                               std::span<const std::pair<std::size_t, std::size_t>> pairs);
/// max(0, ||h_sum - category|| - delta).
Tensor reconstruction_penalty(const Tensor& h_sum, const Tensor& category, double delta);

std::vector<std::pair<std::size_t, std::size_t>> all_pairs(std::size_t k);
/// All pairs when k <= 4, otherwise `n` distinct pairs drawn without replacement.
std::vector<std::pair<std::size_t, std::size_t>> choose_pairs(std::size_t k, std::size_t n, Rng& rng);

/// Everything the objective treats as constant: which caption each image
/// uses, the rationale masks over tokens, and the sampled pairs.
struct StepPlan {
    std::vector<std::size_t> caption_choice;
    std::vector<std::vector<std::vector<bool>>> masks;  // [image][rationale][spatial token]
    std::vector<std::vector<std::pair<std::size_t, std::size_t>>> pairs;
};

struct ObjectiveOutput {
    Tensor loss;
    LossBreakdown breakdown;
    StepPlan plan;
};

/// Builds the full objective for a batch on the active tape. When `plan` is
/// null, masks come from the current (detached) heatmaps and pairs/captions
/// are drawn from `rng`; otherwise the given plan is reused verbatim.
ObjectiveOutput objective(const ModelParams& params, std::span<const TrainExample* const> batch,
                          const TrainerConfig& config, Rng& rng, const StepPlan* plan = nullptr);

/// Learning rate for the update with 0-based index `step` out of `total`.
double scheduled_lr(const TrainerConfig& config, std::size_t step, std::size_t total);

/// AdamW with decoupled weight decay on weight matrices only (not on
/// layernorm gains, biases, embeddings or position tables).
class Trainer {
public:
    Trainer(ModelParams params, TrainerConfig config, std::size_t total_steps);

    LossBreakdown step(std::span<const TrainExample* const> batch, Rng& rng);

    const ModelParams& params() const noexcept { return params_; }
    std::size_t steps_taken() const noexcept { return step_; }
    const TrainerConfig& config() const noexcept { return config_; }

private:
    ModelParams params_;
    TrainerConfig config_;
    std::size_t total_steps_;
    std::size_t step_ = 0;
    std::vector<Tensor> m_;
    std::vector<Tensor> v_;
    std::vector<bool> decay_;
    std::vector<bool> trainable_;
};

bool decays(const std::string& param_name);

} // namespace dcv
