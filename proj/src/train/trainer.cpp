#include "dcv/trainer.hpp"

#include <cmath>
#include <map>
#include <numbers>

#include "dcv/error.hpp"
#include "dcv/explain.hpp"
#include "dcv/log.hpp"
#include "dcv/ops.hpp"
#include "dcv/tape.hpp"

namespace dcv {

void TrainerConfig::validate() const {
    if (lambda < 0.0 || gamma < 0.0) throw ConfigError("lambda and gamma must be >= 0");
    if (epsilon < 0.0 || delta < 0.0) throw ConfigError("epsilon and delta must be >= 0");
    if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
    if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be >= 0");
    if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw ConfigError("warmup_fraction must be in [0, 1)");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (pairs_per_step == 0) throw ConfigError("pairs_per_step must be >= 1");
    if (fixed_tau && !std::isfinite(*fixed_tau)) throw ConfigError("fixed tau must be finite");
    for (double w : layer_weights) {
        if (!(w >= 0.0)) throw ConfigError("layer weights must be >= 0");
    }
}

namespace {

void require_unit_rows(const Tensor& t, const char* what) {
    const std::size_t j = t.shape().back();
    auto v = t.data();
    for (std::size_t r = 0; r < t.size() / j; ++r) {
        double ss = 0.0;
        for (std::size_t k = 0; k < j; ++k) ss += v[r * j + k] * v[r * j + k];
        if (std::abs(std::sqrt(ss) - 1.0) > 1e-6) {
            throw ArgumentError(std::string("infonce: ") + what + " row " + std::to_string(r) + " is not normalized");
        }
    }
}

} // namespace

Tensor infonce(const Tensor& img, const Tensor& txt, double temperature) {
    if (img.rank() != 2 || img.shape() != txt.shape()) {
        throw ArgumentError("infonce: embeddings " + shape_string(img.shape()) + " and " + shape_string(txt.shape()) +
                            " must both be [B, J]");
    }
    if (!(temperature > 0.0)) throw ArgumentError("infonce: temperature must be positive");
    require_unit_rows(img, "image");
    require_unit_rows(txt, "text");
    const std::size_t b = img.shape()[0];
    std::vector<std::size_t> targets(b);
    for (std::size_t i = 0; i < b; ++i) targets[i] = i;
    const Tensor i2t = ops::scale(ops::matmul(img, txt, false, true), 1.0 / temperature);
    const Tensor t2i = ops::scale(ops::matmul(txt, img, false, true), 1.0 / temperature);
    return ops::scale(ops::add(ops::cross_entropy(i2t, targets), ops::cross_entropy(t2i, targets)), 0.5);
}

Tensor disentanglement_penalty(const Tensor& h, double epsilon,
                               std::span<const std::pair<std::size_t, std::size_t>> pairs) {
    if (h.rank() != 2) throw ArgumentError("disentanglement_penalty: expected [K, J], got " + shape_string(h.shape()));
    const std::size_t k = h.shape()[0];
    if (k < 2 || pairs.empty()) {
        log_warning("disentanglement penalty needs at least two rationales; using 0");
        return Tensor::scalar(0.0);
    }
    Tensor select(Shape{pairs.size(), k});
    for (std::size_t p = 0; p < pairs.size(); ++p) {
        const auto [a, b] = pairs[p];
        if (a >= k || b >= k || a == b) throw ArgumentError("disentanglement_penalty: bad pair index");
        select[p * k + a] = 1.0;
        select[p * k + b] = -1.0;
    }
    const Tensor dist = ops::norm(ops::matmul(select, h));
    const Tensor slack = ops::sub(Tensor(Shape{pairs.size()}, epsilon), dist);
    return ops::mean(ops::relu(slack), 0);
}

Tensor reconstruction_penalty(const Tensor& h_sum, const Tensor& category, double delta) {
    if (h_sum.shape() != category.shape() || h_sum.rank() != 1) {
        throw ArgumentError("reconstruction_penalty: " + shape_string(h_sum.shape()) + " vs " +
                            shape_string(category.shape()));
    }
    const Tensor dist = ops::norm(ops::sub(h_sum, category));
    return ops::relu(ops::sub(dist, Tensor::scalar(delta)));
}

std::vector<std::pair<std::size_t, std::size_t>> all_pairs(std::size_t k) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t a = 0; a < k; ++a) {
        for (std::size_t b = a + 1; b < k; ++b) out.emplace_back(a, b);
    }
    return out;
}

std::vector<std::pair<std::size_t, std::size_t>> choose_pairs(std::size_t k, std::size_t n, Rng& rng) {
    auto pairs = all_pairs(k);
    if (k <= 4 || n >= pairs.size()) return pairs;
    // Partial Fisher-Yates, then restore canonical order for determinism of summation.
    for (std::size_t i = 0; i < n; ++i) std::swap(pairs[i], pairs[i + rng.below(pairs.size() - i)]);
    pairs.resize(n);
    std::sort(pairs.begin(), pairs.end());
    return pairs;
}

ObjectiveOutput objective(const ModelParams& params, std::span<const TrainExample* const> batch,
                          const TrainerConfig& config, Rng& rng, const StepPlan* fixed) {
    if (batch.empty()) throw ArgumentError("objective: empty batch");
    const EncoderConfig& ec = params.config();
    const std::size_t b = batch.size();
    const std::size_t t = ec.tokens();
    const std::size_t n = ec.patches();
    const std::size_t jd = ec.joint_dim;
    for (const auto* ex : batch) {
        if (!ex || !ex->image) throw ArgumentError("objective: missing example image");
        if (ex->rationales.empty()) throw DataError("sample '" + ex->id + "' has no rationales");
        if (ex->captions.empty()) throw DataError("sample '" + ex->id + "' has no caption");
    }
    std::vector<double> weights = config.layer_weights;
    if (weights.empty()) weights.assign(ec.layers, 1.0 / static_cast<double>(ec.layers));

    ObjectiveOutput out;
    StepPlan& plan = out.plan;
    if (fixed) {
        plan = *fixed;
        if (plan.caption_choice.size() != b || plan.masks.size() != b || plan.pairs.size() != b) {
            throw ArgumentError("objective: plan does not match the batch");
        }
    } else {
        for (const auto* ex : batch) plan.caption_choice.push_back(ex->captions.size() == 1 ? 0 : rng.below(ex->captions.size()));
    }

    // Every distinct text once.
    std::map<TokenIds, std::size_t> slot;
    std::vector<TokenIds> texts;
    auto index_of = [&](const TokenIds& ids) {
        auto [it, added] = slot.emplace(ids, texts.size());
        if (added) texts.push_back(ids);
        return it->second;
    };
    std::vector<std::size_t> caption_rows, category_rows;
    std::vector<std::vector<std::size_t>> rationale_rows(b);
    for (std::size_t i = 0; i < b; ++i) {
        caption_rows.push_back(index_of(batch[i]->captions.at(plan.caption_choice[i])));
        category_rows.push_back(index_of(batch[i]->category));
        for (const auto& r : batch[i]->rationales) rationale_rows[i].push_back(index_of(r));
    }
    const Tensor text_n = ops::l2_normalize(encode_texts(params, texts));

    std::vector<Image> images;
    images.reserve(b);
    for (const auto* ex : batch) images.push_back(*ex->image);
    const VisualTrace trace = visual_forward(params, patchify(ec, images));
    const Tensor image_n = ops::l2_normalize(trace.embedding);
    const Tensor l_nce = infonce(image_n, ops::embedding(text_n, caption_rows), config.temperature);

    // Contributions on the normalized-embedding scale.
    const Tensor inv_norm = ops::reshape(ops::reciprocal(ops::norm(trace.embedding)), Shape{b, 1, 1});
    const Tensor contrib = ops::mul(weighted_token_contributions(params, trace, weights), inv_norm);

    if (!fixed) {
        const Tensor c_values = contrib.detach();
        const Tensor t_values = text_n.detach();
        plan.masks.resize(b);
        for (std::size_t i = 0; i < b; ++i) {
            const Tensor ci = ops::reshape(ops::slice(c_values, 0, i, 1), Shape{t, jd});
            for (std::size_t row : rationale_rows[i]) {
                const Tensor r = ops::reshape(ops::slice(t_values, 0, row, 1), Shape{jd});
                Heatmap h = heatmap(ci, Embedding{r, true});
                const double tau = config.fixed_tau ? *config.fixed_tau : dynamic_threshold(h.values);
                plan.masks[i].push_back(threshold_mask(h, tau).grid.cells);
            }
            plan.pairs.push_back(choose_pairs(rationale_rows[i].size(), config.pairs_per_step, rng));
        }
    }

    Tensor disen_sum = Tensor::scalar(0.0);
    Tensor recon_sum = Tensor::scalar(0.0);
    for (std::size_t i = 0; i < b; ++i) {
        const std::size_t k = rationale_rows[i].size();
        if (plan.masks[i].size() != k) throw ArgumentError("objective: plan mask count mismatch");
        Tensor select(Shape{k, t});
        for (std::size_t r = 0; r < k; ++r) {
            if (plan.masks[i][r].size() != n) throw ArgumentError("objective: plan mask size mismatch");
            for (std::size_t p = 0; p < n; ++p) select[r * t + p + 1] = plan.masks[i][r][p] ? 1.0 : 0.0;
        }
        const Tensor ci = ops::reshape(ops::slice(contrib, 0, i, 1), Shape{t, jd});
        const Tensor h = ops::matmul(select, ci);  // [K, J]
        disen_sum = ops::add(disen_sum, disentanglement_penalty(h, config.epsilon, plan.pairs[i]));
        const Tensor category = ops::reshape(ops::slice(text_n, 0, category_rows[i], 1), Shape{jd});
        recon_sum = ops::add(recon_sum, reconstruction_penalty(ops::sum(h, 0), category, config.delta));
    }
    const Tensor disen = ops::scale(disen_sum, 1.0 / static_cast<double>(b));
    const Tensor recon = ops::scale(recon_sum, 1.0 / static_cast<double>(b));

    Tensor total = l_nce;
    if (config.lambda > 0.0) total = ops::add(total, ops::scale(disen, config.lambda));
    if (config.gamma > 0.0) total = ops::add(total, ops::scale(recon, config.gamma));

    out.breakdown.infonce = l_nce.item();
    out.breakdown.disen_penalty = disen.item();
    out.breakdown.recon_penalty = recon.item();
    out.breakdown.total = total.item();
    if (!std::isfinite(out.breakdown.total)) {
        throw NumericError("non-finite loss: infonce " + std::to_string(out.breakdown.infonce) + ", disen " +
                           std::to_string(out.breakdown.disen_penalty) + ", recon " +
                           std::to_string(out.breakdown.recon_penalty));
    }
    out.loss = total;
    return out;
}

double scheduled_lr(const TrainerConfig& c, std::size_t step, std::size_t total) {
    if (total == 0) return 0.0;
    const auto warmup = static_cast<std::size_t>(c.warmup_fraction * static_cast<double>(total));
    if (step < warmup) return c.learning_rate * static_cast<double>(step + 1) / static_cast<double>(warmup);
    const double span = static_cast<double>(std::max<std::size_t>(1, total - warmup));
    const double progress = std::min(1.0, static_cast<double>(step - warmup) / span);
    return c.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

bool decays(const std::string& name) {
    auto ends = [&](std::string_view s) {
        return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    return ends("_w") || ends(".proj");
}

Trainer::Trainer(ModelParams params, TrainerConfig config, std::size_t total_steps)
    : params_(std::move(params)), config_(std::move(config)), total_steps_(total_steps) {
    config_.validate();
    if (!config_.layer_weights.empty() && config_.layer_weights.size() != params_.config().layers) {
        throw ConfigError("layer weight count does not match the model depth");
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
        m_.emplace_back(params_.at(i).shape(), 0.0);
        v_.emplace_back(params_.at(i).shape(), 0.0);
        decay_.push_back(decays(params_.name(i)));
        // The contrastive temperature comes from the config; logit_scale is kept as a record only.
        trainable_.push_back(params_.name(i) != "logit_scale");
    }
}

LossBreakdown Trainer::step(std::span<const TrainExample* const> batch, Rng& rng) {
    Tape tape;
    GradientMap grads;
    ModelParams live = params_;
    LossBreakdown breakdown;
    {
        TapeScope scope(tape);
        for (std::size_t i = 0; i < live.size(); ++i) {
            if (trainable_[i]) live.at(i) = tape.leaf(params_.at(i));
        }
        ObjectiveOutput out = objective(live, batch, config_, rng);
        breakdown = out.breakdown;
        grads = tape.backward(out.loss);
    }
    const double lr = scheduled_lr(config_, step_, total_steps_);
    ++step_;
    const double t = static_cast<double>(step_);
    const double c1 = 1.0 - std::pow(config_.beta1, t);
    const double c2 = 1.0 - std::pow(config_.beta2, t);
    for (std::size_t i = 0; i < params_.size(); ++i) {
        if (!trainable_[i]) continue;
        auto it = grads.find(*live.at(i).node());
        auto p = params_.at(i).mutable_data();
        auto m = m_[i].mutable_data();
        auto v = v_[i].mutable_data();
        const double wd = decay_[i] ? config_.weight_decay : 0.0;
        for (std::size_t k = 0; k < p.size(); ++k) {
            const double g = it == grads.end() ? 0.0 : it->second[k];
            m[k] = config_.beta1 * m[k] + (1.0 - config_.beta1) * g;
            v[k] = config_.beta2 * v[k] + (1.0 - config_.beta2) * g * g;
            const double update = (m[k] / c1) / (std::sqrt(v[k] / c2) + config_.adam_eps);
            p[k] -= lr * (update + wd * p[k]);
        }
    }
    return breakdown;
}

} // namespace dcv
