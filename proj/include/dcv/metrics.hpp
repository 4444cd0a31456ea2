#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "dcv/image.hpp"
#include "dcv/tensor.hpp"

namespace dcv {

/// |a & b| / |a | b|, or nothing when both masks are empty.
std::optional<double> iou(const Mask& a, const Mask& b);

struct MaskSample {
    std::string part;
    Mask pred;
    Mask gt;
};

struct IouResult {
    std::map<std::string, double> per_part;
    double mean = 0.0;
    std::size_t samples = 0;
    std::size_t skipped = 0;  // both masks empty
};

/// Per-part IoU averaged over that part's samples, then averaged over parts.
IouResult miou(std::span<const MaskSample> samples);

/// 1 - |<m, m'>| of two L2-normalized heatmaps; nothing if either is zero.
std::optional<double> pair_disentanglability(std::span<const double> a, std::span<const double> b);

struct DisenResult {
    double value = 0.0;
    std::size_t images = 0;
    std::size_t skipped_pairs = 0;
};

/// heatmaps[image][rationale][token]. Each image needs at least 2 heatmaps.
DisenResult disentanglability(const std::vector<std::vector<std::vector<double>>>& heatmaps);

/// Predicted class per row: argmax over classes of <image, class>, lowest
/// index on ties. Rows are expected normalized; the score is the plain dot.
std::vector<std::size_t> predict_classes(const Tensor& image_embs, const Tensor& class_embs);
double accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> labels);

/// Top-1 accuracy of argmax cosine similarity against one prompt per class.
double zero_shot_accuracy(const Tensor& image_embs, std::span<const std::size_t> labels, const Tensor& class_embs);

/// Class score = mean over that class's rationales of <image, rationale>.
double rationale_based_accuracy(const Tensor& image_embs, std::span<const std::size_t> labels,
                                std::span<const Tensor> rationale_embs);

struct ProbeResult {
    double accuracy = 0.0;
    std::size_t iterations = 0;
    double final_grad_norm = 0.0;
};

/// Multinomial logistic regression (with bias) by full-batch gradient descent
/// until the gradient norm drops below `tol` or `max_iters` is reached.
ProbeResult linear_probe(const Tensor& train_x, std::span<const std::size_t> train_y, const Tensor& test_x,
                         std::span<const std::size_t> test_y, std::size_t max_iters = 5000, double tol = 1e-6);

struct RecallResult {
    std::map<std::size_t, double> i2t;
    std::map<std::size_t, double> t2i;
};

/// Pair i of (images, texts) is the match. Ranking by dot product, ties
/// broken by lower index.
RecallResult retrieval_recall(const Tensor& image_embs, const Tensor& text_embs, std::span<const std::size_t> ks);

/// Rank of `target` among `scores` (0 = best) with lower-index tie-break.
std::size_t rank_of(std::span<const double> scores, std::size_t target);

struct MetricReport {
    std::string metric;
    nlohmann::json values;
    nlohmann::json breakdown = nlohmann::json::object();
    std::size_t sample_count = 0;
    nlohmann::json config = nlohmann::json::object();

    nlohmann::json to_json() const;
};

} // namespace dcv
