#include "dcv/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "dcv/checkpoint.hpp"
#include "dcv/error.hpp"
#include "dcv/explain.hpp"
#include "dcv/log.hpp"
#include "dcv/ops.hpp"
#include "dcv/tape.hpp"

namespace dcv {

std::string class_prompt(const std::string& name) { return "a photo of a " + name; }

const char* caption_mode_name(CaptionMode m) {
    switch (m) {
        case CaptionMode::prompt: return "prompt";
        case CaptionMode::described: return "described";
        case CaptionMode::sampled: return "sampled";
    }
    return "?";
}

CaptionMode caption_mode_from_name(const std::string& name) {
    for (auto m : {CaptionMode::prompt, CaptionMode::described, CaptionMode::sampled}) {
        if (name == caption_mode_name(m)) return m;
    }
    throw ConfigError("unknown caption mode '" + name + "' (prompt, described, sampled)");
}

std::vector<std::string> category_rationales(const CategorySpec& spec) {
    std::vector<std::string> out;
    for (const auto& p : spec.parts) out.push_back(p.phrase);
    return out;
}

namespace {

std::string described(const CategorySpec& spec) {
    std::string s = class_prompt(spec.name) + " with";
    for (const auto& p : spec.parts) s += " " + p.phrase;
    return s;
}

} // namespace

Vocabulary dataset_vocabulary(const Dataset& data) {
    std::vector<std::string> corpus;
    for (const auto& c : data.categories) {
        corpus.push_back(described(c));
        corpus.push_back(c.name);
    }
    return Vocabulary::from_corpus(corpus);
}

std::size_t required_text_len(const Dataset& data, const Vocabulary& vocab) {
    std::size_t n = 0;
    for (const auto& c : data.categories) n = std::max(n, vocab.tokenize(described(c)).size());
    return n;
}

EncoderConfig model_config_for(const Dataset& data, const Vocabulary& vocab, EncoderConfig base) {
    base.image_side = data.options.image_side;
    base.vocab_size = vocab.size();
    if (base.text_len == 0) base.text_len = std::max<std::size_t>(16, required_text_len(data, vocab));
    base.validate();
    return base;
}

std::vector<TrainExample> make_examples(const Dataset& data, const Vocabulary& vocab,
                                        std::span<const std::size_t> indices, CaptionMode mode) {
    std::vector<TrainExample> out;
    out.reserve(indices.size());
    for (auto i : indices) {
        const SyntheticScene& s = data.scenes.at(i);
        const CategorySpec& spec = data.categories.at(s.label);
        TrainExample ex;
        ex.id = s.category + "_" + std::to_string(i);
        ex.image = &s.image;
        ex.category = vocab.tokenize(class_prompt(spec.name));
        for (const auto& r : category_rationales(spec)) ex.rationales.push_back(vocab.tokenize(r));
        switch (mode) {
            case CaptionMode::prompt: ex.captions.push_back(ex.category); break;
            case CaptionMode::described: ex.captions.push_back(vocab.tokenize(described(spec))); break;
            case CaptionMode::sampled:
                for (const auto& p : spec.parts) ex.captions.push_back(vocab.tokenize(class_prompt(spec.name) + " with " + p.phrase));
                break;
        }
        out.push_back(std::move(ex));
    }
    return out;
}

Tensor text_embeddings(const ModelParams& params, const Vocabulary& vocab, std::span<const std::string> texts) {
    std::vector<TokenIds> ids;
    for (const auto& t : texts) ids.push_back(vocab.tokenize(t));
    NoGradScope ng;
    return ops::l2_normalize(encode_texts(params, ids));
}

void for_each_encoding(const ModelParams& params, std::span<const Image* const> images, bool record_ledger,
                       const std::function<void(std::size_t, const ImageEncoding&)>& fn, std::size_t batch) {
    std::vector<Image> chunk;
    for (std::size_t start = 0; start < images.size(); start += batch) {
        const std::size_t end = std::min(images.size(), start + batch);
        chunk.clear();
        for (std::size_t k = start; k < end; ++k) chunk.push_back(*images[k]);
        auto enc = encode_images(chunk, params, record_ledger, batch);
        for (std::size_t k = start; k < end; ++k) fn(k, enc[k - start]);
    }
}

std::vector<const Image*> scene_images(const Dataset& data, std::span<const std::size_t> indices) {
    std::vector<const Image*> out;
    for (auto i : indices) out.push_back(&data.scenes.at(i).image);
    return out;
}

std::vector<std::size_t> scene_labels(const Dataset& data, std::span<const std::size_t> indices) {
    std::vector<std::size_t> out;
    for (auto i : indices) out.push_back(data.scenes.at(i).label);
    return out;
}

namespace {

// Whether at least half of the patch's pixels lie inside the mask.
bool patch_on_mask(const Mask& mask, std::size_t cell, std::size_t grid, std::size_t patch) {
    const std::size_t py = cell / grid, px = cell % grid;
    std::size_t hit = 0;
    for (std::size_t y = 0; y < patch; ++y) {
        for (std::size_t x = 0; x < patch; ++x) hit += mask.at(py * patch + y, px * patch + x);
    }
    return 2 * hit >= patch * patch;
}

std::vector<double> image_rows(const Tensor& t, std::size_t row) {
    const std::size_t j = t.shape()[1];
    return {t.data().begin() + static_cast<std::ptrdiff_t>(row * j), t.data().begin() + static_cast<std::ptrdiff_t>((row + 1) * j)};
}

} // namespace

EvalSummary evaluate(const ModelParams& params, const Vocabulary& vocab, const Dataset& data,
                     std::span<const std::size_t> indices, std::span<const double> layer_weights) {
    const EncoderConfig& ec = params.config();
    if (indices.empty()) throw ArgumentError("evaluate: no scenes");
    std::vector<double> weights(layer_weights.begin(), layer_weights.end());
    if (weights.empty()) weights.assign(ec.layers, 1.0 / static_cast<double>(ec.layers));

    std::vector<std::string> prompts, phrases;
    for (const auto& c : data.categories) prompts.push_back(class_prompt(c.name));
    for (const auto& c : data.categories) {
        for (const auto& r : category_rationales(c)) {
            if (std::find(phrases.begin(), phrases.end(), r) == phrases.end()) phrases.push_back(r);
        }
    }
    const Tensor class_embs = text_embeddings(params, vocab, prompts);
    const Tensor phrase_embs = text_embeddings(params, vocab, phrases);
    auto phrase_row = [&](const std::string& r) {
        return static_cast<std::size_t>(std::find(phrases.begin(), phrases.end(), r) - phrases.begin());
    };

    EvalSummary s;
    s.images = indices.size();
    std::vector<double> image_embs(indices.size() * ec.joint_dim);
    std::vector<MaskSample> masks;
    std::vector<std::vector<std::vector<double>>> maps;
    std::size_t pairs = 0, hits = 0;
    auto images = scene_images(data, indices);
    NoGradScope ng;
    for_each_encoding(params, images, true, [&](std::size_t k, const ImageEncoding& enc) {
        const SyntheticScene& scene = data.scenes.at(indices[k]);
        const Embedding e = enc.embedding.normalized_copy();
        std::copy(e.vector.data().begin(), e.vector.data().end(), image_embs.begin() + static_cast<std::ptrdiff_t>(k * ec.joint_dim));
        const Tensor contrib = token_contributions(*enc.ledger, weights);
        auto& image_maps = maps.emplace_back();
        for (const auto& pm : scene.part_masks) {
            const auto row = image_rows(phrase_embs, phrase_row(pm.rationale));
            Heatmap h = heatmap(contrib, Embedding{Tensor(Shape{ec.joint_dim}, row), true});
            const BinaryMask bm = dynamic_mask(h);
            masks.push_back({pm.rationale, bm.pixels(ec.patch_size), pm.mask});
            hits += patch_on_mask(pm.mask, argmax(h.values), ec.grid(), ec.patch_size);
            ++pairs;
            image_maps.push_back(std::move(h.values));
        }
    });
    const Tensor embs(Shape{indices.size(), ec.joint_dim}, image_embs);
    const auto labels = scene_labels(data, indices);
    s.zeroshot_acc = zero_shot_accuracy(embs, labels, class_embs);
    s.iou = miou(masks);
    s.miou = s.iou.mean;
    s.disen = disentanglability(maps);
    s.disentanglability = s.disen.value;
    s.argmax_in_mask = pairs ? static_cast<double>(hits) / static_cast<double>(pairs) : 0.0;
    return s;
}

std::string train_log_csv(std::span<const EpochRecord> log) {
    std::ostringstream out;
    out.precision(17);
    out << "epoch,infonce,disen_penalty,recon_penalty,total,zeroshot_acc,miou,disentanglability\n";
    for (const auto& r : log) {
        out << r.epoch << ',' << r.loss.infonce << ',' << r.loss.disen_penalty << ',' << r.loss.recon_penalty << ','
            << r.loss.total << ',' << r.eval.zeroshot_acc << ',' << r.eval.miou << ',' << r.eval.disentanglability << '\n';
    }
    return out.str();
}

TrainResult train(const Dataset& data, const Vocabulary& vocab, ModelParams init, const TrainerConfig& config,
                  const TrainOptions& options) {
    config.validate();
    const auto train_idx = data.indices(Split::train);
    auto val_idx = data.indices(Split::val);
    if (train_idx.empty()) throw DataError("train split is empty");
    if (val_idx.empty()) val_idx = train_idx;
    const auto examples = make_examples(data, vocab, train_idx, options.captions);

    const std::size_t bs = config.batch_size;
    const std::size_t per_epoch = (examples.size() + bs - 1) / bs;
    Trainer trainer(std::move(init), config, per_epoch * config.epochs);
    TrainResult result;

    auto record = [&](std::size_t epoch, LossBreakdown loss) {
        EpochRecord r{epoch, loss, {}};
        if (options.evaluate_epochs) r.eval = evaluate(trainer.params(), vocab, data, val_idx, config.layer_weights);
        result.log.push_back(r);
        if (!options.out_dir.empty()) {
            save_checkpoint(trainer.params(), vocab, options.out_dir);
            write_text_file(options.out_dir / "train_log.csv", train_log_csv(result.log));
        }
        log_info("epoch " + std::to_string(epoch) + ": infonce " + std::to_string(loss.infonce) + ", disen " +
                 std::to_string(loss.disen_penalty) + ", recon " + std::to_string(loss.recon_penalty) + ", val acc " +
                 std::to_string(r.eval.zeroshot_acc) + ", miou " + std::to_string(r.eval.miou) + ", disen " +
                 std::to_string(r.eval.disentanglability));
    };

    const double nan = std::numeric_limits<double>::quiet_NaN();
    record(0, LossBreakdown{nan, nan, nan, nan});
    const Rng root(config.seed);
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        Rng order_rng = root.split(2 * epoch);
        Rng step_rng = root.split(2 * epoch + 1);
        std::vector<std::size_t> order(examples.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        order_rng.shuffle(order);
        LossBreakdown sum;
        std::vector<const TrainExample*> batch;
        for (std::size_t start = 0; start < order.size(); start += bs) {
            batch.clear();
            for (std::size_t k = start; k < std::min(order.size(), start + bs); ++k) batch.push_back(&examples[order[k]]);
            const LossBreakdown l = trainer.step(batch, step_rng);
            sum.infonce += l.infonce;
            sum.disen_penalty += l.disen_penalty;
            sum.recon_penalty += l.recon_penalty;
            sum.total += l.total;
        }
        const double steps = static_cast<double>(per_epoch);
        record(epoch, LossBreakdown{sum.infonce / steps, sum.disen_penalty / steps, sum.recon_penalty / steps,
                                    sum.total / steps});
    }
    result.params = trainer.params();
    return result;
}

} // namespace dcv
