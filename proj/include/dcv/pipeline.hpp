#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dcv/bench.hpp"
#include "dcv/encoder.hpp"
#include "dcv/metrics.hpp"
#include "dcv/tokenizer.hpp"
#include "dcv/trainer.hpp"

namespace dcv {

/// "a photo of a {name}".
std::string class_prompt(const std::string& name);

/// What the contrastive term pairs each image with.
enum class CaptionMode {
    prompt,     // the bare class prompt
    described,  // class prompt followed by every rationale phrase of the class
    sampled,    // class prompt followed by one rationale phrase, drawn per step
};
const char* caption_mode_name(CaptionMode m);
CaptionMode caption_mode_from_name(const std::string& name);

/// Rationale phrases of a category, in spec order.
std::vector<std::string> category_rationales(const CategorySpec& spec);

/// Words of every prompt, caption and phrase the dataset can produce.
Vocabulary dataset_vocabulary(const Dataset& data);

/// Longest token sequence the given caption mode produces for `data`.
std::size_t required_text_len(const Dataset& data, const Vocabulary& vocab);

/// `base` with the image side, vocabulary size and (when base.text_len is 0)
/// a text context of max(16, required_text_len) filled in from the dataset.
EncoderConfig model_config_for(const Dataset& data, const Vocabulary& vocab, EncoderConfig base);

/// Examples point into `data`, which must outlive them.
std::vector<TrainExample> make_examples(const Dataset& data, const Vocabulary& vocab,
                                        std::span<const std::size_t> indices, CaptionMode mode);

/// Row-normalized text embeddings of `texts`, [n, J].
Tensor text_embeddings(const ModelParams& params, const Vocabulary& vocab, std::span<const std::string> texts);

/// Calls `fn(k, encoding)` for each image in order, encoding `batch` images at a time.
void for_each_encoding(const ModelParams& params, std::span<const Image* const> images, bool record_ledger,
                       const std::function<void(std::size_t, const ImageEncoding&)>& fn, std::size_t batch = 64);

std::vector<const Image*> scene_images(const Dataset& data, std::span<const std::size_t> indices);
std::vector<std::size_t> scene_labels(const Dataset& data, std::span<const std::size_t> indices);

struct EvalSummary {
    std::size_t images = 0;
    double zeroshot_acc = 0.0;
    double miou = 0.0;
    double disentanglability = 0.0;
    double argmax_in_mask = 0.0;  // (image, rationale) pairs whose peak patch is on the part
    IouResult iou;
    DisenResult disen;
};

/// Zero-shot accuracy plus heatmap-based localization metrics over the given
/// scenes, each scored against the rationales of its own category.
EvalSummary evaluate(const ModelParams& params, const Vocabulary& vocab, const Dataset& data,
                     std::span<const std::size_t> indices, std::span<const double> layer_weights = {});

struct TrainOptions {
    CaptionMode captions = CaptionMode::prompt;
    std::filesystem::path out_dir;  // empty: nothing written
    bool evaluate_epochs = true;    // held-out evaluation after each epoch
};

struct EpochRecord {
    std::size_t epoch = 0;
    LossBreakdown loss;  // epoch mean; NaN for epoch 0 (before training)
    EvalSummary eval;
};

struct TrainResult {
    ModelParams params;
    std::vector<EpochRecord> log;
};

/// Trains on the train split, evaluating on val. With an output directory,
/// rewrites train_log.csv and the checkpoint after every epoch.
TrainResult train(const Dataset& data, const Vocabulary& vocab, ModelParams init, const TrainerConfig& config,
                  const TrainOptions& options = {});

std::string train_log_csv(std::span<const EpochRecord> log);

} // namespace dcv
