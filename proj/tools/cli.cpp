#include "cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "dcv/bench.hpp"
#include "dcv/checkpoint.hpp"
#include "dcv/error.hpp"
#include "dcv/explain.hpp"
#include "dcv/log.hpp"
#include "dcv/metrics.hpp"
#include "dcv/netpbm.hpp"
#include "dcv/ontology.hpp"
#include "dcv/pipeline.hpp"
#include "dcv/profile.hpp"
#include "dcv/tape.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace dcv::cli {

namespace {

// Every setting any subcommand reads. Precedence: flag > --config file > these defaults.
struct Settings {
    std::uint64_t seed = 0;
    std::string out = "out";
    std::size_t threads = 1;
    bool verbose = false;

    std::string data;
    std::string checkpoint;
    std::string profile;

    std::size_t n_per_class = 512;
    double noise = 0.1;
    double distractor = 0.25;
    double contrast_min = 0.5;

    std::size_t layers = 4;
    std::size_t heads = 4;
    std::size_t width = 64;
    std::size_t joint_dim = 32;
    std::size_t patch_size = 8;
    std::size_t text_layers = 2;
    std::size_t text_len = 0;  // 0: fit the longest caption

    std::size_t epochs = 8;
    std::size_t batch_size = 32;
    double learning_rate = 3e-4;
    double lambda = 0.5;
    double gamma = 0.5;
    double epsilon = 0.5;
    double delta = 0.5;
    double temperature = 0.07;
    double warmup_fraction = 0.1;
    double weight_decay = 0.1;
    std::size_t pairs_per_step = 6;
    double tau = -1.0;  // negative: per-heatmap mu + sigma
    std::string captions = "prompt";
    bool ablate_disen = false;
    bool ablate_recon = false;

    std::string split = "test";
    std::string reference_split = "val";
    bool fallback_uniform = false;
    std::string image;
    std::string rationale;
    std::string rationale_file;
    std::vector<std::size_t> ks{1, 5, 10};
    std::size_t k = 5;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(Settings, seed, out, threads, verbose, data, checkpoint, profile,
                                                n_per_class, noise, distractor, contrast_min, layers, heads, width,
                                                joint_dim, patch_size, text_layers, text_len, epochs, batch_size,
                                                learning_rate, lambda, gamma, epsilon, delta, temperature,
                                                warmup_fraction, weight_decay, pairs_per_step, tau, captions,
                                                ablate_disen, ablate_recon, split, reference_split, fallback_uniform,
                                                image, rationale, rationale_file, ks, k)

// Settings that do not change results; left out of report config hashes.
const char* const kPlumbing[] = {"out", "threads", "verbose", "data", "checkpoint", "profile", "image", "rationale_file"};

Settings load_config_file(const std::string& path) {
    json j;
    try {
        j = json::parse(read_text_file(path));
    } catch (const json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
    if (!j.is_object()) throw ConfigError(path + ": expected a JSON object");
    const json known = Settings{};
    for (const auto& [key, value] : j.items()) {
        if (!known.contains(key)) throw ConfigError(path + ": unknown setting '" + key + "'");
    }
    try {
        return j.get<Settings>();
    } catch (const json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

std::string config_path(const std::vector<std::string>& args) {
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) return args[i + 1];
        if (args[i].rfind("--config=", 0) == 0) return args[i].substr(9);
    }
    return {};
}

json report_config(const Settings& s, const std::string& command) {
    json j = s;
    for (const char* k : kPlumbing) j.erase(k);
    j["command"] = command;
    return j;
}

struct Context {
    Settings s;
    std::string command;
    std::ostream& out;

    fs::path out_dir() const { return s.out; }

    void snapshot() const {
        fs::create_directories(out_dir());
        json j = s;
        j["command"] = command;
        write_text_file(out_dir() / "config.json", j.dump(2) + "\n");
    }

    Dataset dataset() const {
        if (s.data.empty()) throw ArgumentError("--data is required");
        return read_dataset(s.data);
    }

    Checkpoint model() const {
        if (s.checkpoint.empty()) throw ArgumentError("--checkpoint is required");
        return load_checkpoint(s.checkpoint);
    }

    std::vector<double> weights(const ModelParams& params) const {
        if (s.profile.empty()) return {};
        auto p = load_profile(s.profile);
        if (p.weights.size() != params.config().layers) throw ArgumentError("profile depth does not match the model");
        return p.weights;
    }

    void report(const MetricReport& r) const {
        write_text_file(out_dir() / "report.json", r.to_json().dump(2) + "\n");
    }
};

TrainerConfig trainer_config(const Settings& s) {
    TrainerConfig c;
    c.lambda = s.ablate_disen ? 0.0 : s.lambda;
    c.gamma = s.ablate_recon ? 0.0 : s.gamma;
    c.epsilon = s.epsilon;
    c.delta = s.delta;
    if (s.tau >= 0.0) c.fixed_tau = s.tau;
    c.temperature = s.temperature;
    c.learning_rate = s.learning_rate;
    c.warmup_fraction = s.warmup_fraction;
    c.weight_decay = s.weight_decay;
    c.epochs = s.epochs;
    c.batch_size = s.batch_size;
    c.pairs_per_step = s.pairs_per_step;
    c.seed = s.seed;
    return c;
}

Embedding row_embedding(const Tensor& t, std::size_t row) {
    const std::size_t j = t.shape()[1];
    std::vector<double> v(t.data().begin() + static_cast<std::ptrdiff_t>(row * j),
                          t.data().begin() + static_cast<std::ptrdiff_t>((row + 1) * j));
    return Embedding{Tensor(Shape{j}, std::move(v)), true};
}

std::string fmt(double v) {
    std::ostringstream o;
    o.precision(6);
    o << v;
    return o.str();
}

// Normalized image embeddings of the scenes, [n, J].
Tensor image_embeddings(const ModelParams& params, const Dataset& data, std::span<const std::size_t> idx) {
    const std::size_t jd = params.config().joint_dim;
    std::vector<double> rows(idx.size() * jd);
    auto images = scene_images(data, idx);
    NoGradScope ng;
    for_each_encoding(params, images, false, [&](std::size_t k, const ImageEncoding& enc) {
        const Embedding e = enc.embedding.normalized_copy();
        std::copy(e.vector.data().begin(), e.vector.data().end(), rows.begin() + static_cast<std::ptrdiff_t>(k * jd));
    });
    return Tensor(Shape{idx.size(), jd}, std::move(rows));
}

Tensor class_embeddings(const ModelParams& params, const Vocabulary& vocab, const Dataset& data) {
    std::vector<std::string> prompts;
    for (const auto& c : data.categories) prompts.push_back(class_prompt(c.name));
    return text_embeddings(params, vocab, prompts);
}

int cmd_gen_data(const Context& c) {
    BenchOptions o;
    o.noise_amplitude = c.s.noise;
    o.distractor_probability = c.s.distractor;
    o.contrast_min = c.s.contrast_min;
    const Dataset d = gen_dataset(default_categories(), c.s.n_per_class, c.s.seed, o);
    write_dataset(d, c.out_dir());
    c.out << "wrote " << d.scenes.size() << " scenes (" << d.indices(Split::train).size() << " train, "
          << d.indices(Split::val).size() << " val, " << d.indices(Split::test).size() << " test) to " << c.s.out << "\n";
    return 0;
}

int cmd_validate_ontology(const Context& c, const std::vector<std::string>& paths) {
    std::size_t valid = 0, invalid = 0;
    auto check = [&](const fs::path& file) {
        try {
            const auto v = validate(parse_tree(read_text_file(file)));
            if (v.empty()) {
                ++valid;
                return;
            }
            ++invalid;
            for (const auto& x : v) c.out << file.string() << ": " << code_name(x.code) << ": " << x.message << "\n";
        } catch (const Error& e) {
            ++invalid;
            c.out << file.string() << ": " << e.what() << "\n";
        }
    };
    for (const auto& p : paths) {
        if (fs::is_directory(p)) {
            std::vector<fs::path> files;
            for (const auto& e : fs::directory_iterator(p)) {
                const auto name = e.path().filename().string();
                if (e.path().extension() == ".json" && !name.ends_with(".spec.json")) files.push_back(e.path());
            }
            std::sort(files.begin(), files.end());
            for (const auto& f : files) check(f);
        } else if (fs::exists(p)) {
            check(p);
        } else {
            throw ArgumentError("no such file or directory: " + p);
        }
    }
    c.out << valid << " valid, " << invalid << " invalid\n";
    return invalid == 0 ? 0 : 1;
}

int cmd_train(const Context& c) {
    const Dataset data = c.dataset();
    const Vocabulary vocab = dataset_vocabulary(data);
    EncoderConfig base;
    base.layers = c.s.layers;
    base.heads = c.s.heads;
    base.width = c.s.width;
    base.joint_dim = c.s.joint_dim;
    base.patch_size = c.s.patch_size;
    base.text_layers = c.s.text_layers;
    base.text_len = c.s.text_len;
    const EncoderConfig ec = model_config_for(data, vocab, base);
    TrainerConfig tc = trainer_config(c.s);
    Rng rng(c.s.seed);
    ModelParams init = init_params(ec, rng, tc.temperature);
    tc.layer_weights = c.weights(init);
    TrainOptions opts;
    opts.captions = caption_mode_from_name(c.s.captions);
    opts.out_dir = c.out_dir();
    const TrainResult r = train(data, vocab, std::move(init), tc, opts);
    const auto& last = r.log.back();
    c.out << "trained " << tc.epochs << " epochs; val zero-shot " << fmt(last.eval.zeroshot_acc) << ", mIoU "
          << fmt(last.eval.miou) << ", disentanglability " << fmt(last.eval.disentanglability) << "\n";
    return 0;
}

int cmd_profile(const Context& c) {
    const Checkpoint m = c.model();
    const Dataset data = c.dataset();
    const auto ref_idx = data.indices(split_from_name(c.s.reference_split));
    const auto eval_idx = data.indices(split_from_name(c.s.split));
    log_info("ablation means from the " + c.s.reference_split + " split, curve on the " + c.s.split + " split");
    const auto ref = scene_images(data, ref_idx);
    const auto imgs = scene_images(data, eval_idx);
    const auto labels = scene_labels(data, eval_idx);
    const AblationProfile p =
        profile_model(m.params, ref, imgs, labels, class_embeddings(m.params, m.vocab, data), c.s.fallback_uniform);
    write_text_file(c.out_dir() / "ablation.csv", ablation_csv(p));
    save_profile(p, c.out_dir());
    if (p.uniform_fallback) log_warning("flat ablation profile; using uniform layer weights");
    c.out << "accuracy curve:";
    for (double a : p.curve) c.out << " " << fmt(a);
    c.out << "\nweights:";
    for (double w : p.weights) c.out << " " << fmt(w);
    c.out << "\n";
    return 0;
}

int cmd_explain(const Context& c) {
    const Checkpoint m = c.model();
    if (c.s.image.empty()) throw ArgumentError("--image is required");
    if (c.s.rationale.empty()) throw ArgumentError("--rationale is required");
    const EncoderConfig& ec = m.params.config();
    const Image img = read_ppm(c.s.image);
    NoGradScope ng;
    const ImageEncoding enc = encode_image(img, m.params, true);
    std::vector<double> w = c.weights(m.params);
    if (w.empty()) w.assign(ec.layers, 1.0 / static_cast<double>(ec.layers));
    const Tensor contrib = token_contributions(*enc.ledger, w);
    const std::vector<std::string> text{c.s.rationale};
    const Tensor r = text_embeddings(m.params, m.vocab, text);
    Heatmap h = heatmap(contrib, row_embedding(r, 0));
    h.image_id = fs::path(c.s.image).stem().string();
    h.rationale = c.s.rationale;
    const BinaryMask mask = dynamic_mask(h);
    export_heatmap(h, ec.patch_size, c.out_dir(), "heatmap");
    fs::rename(c.out_dir() / "heatmap.csv", c.out_dir() / "values.csv");
    export_mask(mask, ec.patch_size, c.out_dir(), "mask");
    c.out << "tau " << fmt(mask.tau) << ", " << mask.grid.count() << " of " << mask.grid.cells.size() << " patches"
          << (mask.fallback ? " (argmax fallback)" : "") << "\n";
    return 0;
}

int cmd_eval_seg_disen(const Context& c, bool seg) {
    const Checkpoint m = c.model();
    const Dataset data = c.dataset();
    const auto idx = data.indices(split_from_name(c.s.split));
    const EvalSummary e = evaluate(m.params, m.vocab, data, idx, c.weights(m.params));
    MetricReport r;
    r.config = report_config(c.s, c.command);
    r.sample_count = e.images;
    if (seg) {
        r.metric = "miou";
        r.values = {{"miou", e.miou}, {"argmax_in_mask", e.argmax_in_mask}, {"skipped", e.iou.skipped}};
        r.breakdown = e.iou.per_part;
        c.out << "mIoU " << fmt(e.miou) << " over " << e.iou.per_part.size() << " parts\n";
    } else {
        r.metric = "disentanglability";
        r.values = {{"disentanglability", e.disentanglability}, {"skipped_pairs", e.disen.skipped_pairs}};
        c.out << "disentanglability " << fmt(e.disentanglability) << "\n";
    }
    c.report(r);
    return 0;
}

int cmd_eval_zeroshot(const Context& c) {
    const Checkpoint m = c.model();
    const Dataset data = c.dataset();
    const auto idx = data.indices(split_from_name(c.s.split));
    const auto labels = scene_labels(data, idx);
    const auto pred = predict_classes(image_embeddings(m.params, data, idx), class_embeddings(m.params, m.vocab, data));
    const auto names = data.class_names();
    json per_class = json::object();
    for (std::size_t k = 0; k < names.size(); ++k) {
        std::size_t n = 0, hit = 0;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (labels[i] != k) continue;
            ++n;
            hit += pred[i] == k;
        }
        if (n) per_class[names[k]] = static_cast<double>(hit) / static_cast<double>(n);
    }
    MetricReport r{"zeroshot_accuracy", {{"accuracy", accuracy(pred, labels)}}, per_class, labels.size(),
                   report_config(c.s, c.command)};
    c.report(r);
    c.out << "zero-shot accuracy " << fmt(r.values["accuracy"].get<double>()) << "\n";
    return 0;
}

int cmd_eval_probe(const Context& c) {
    const Checkpoint m = c.model();
    const Dataset data = c.dataset();
    const auto tr = data.indices(Split::train);
    const auto te = data.indices(split_from_name(c.s.split));
    const ProbeResult p = linear_probe(image_embeddings(m.params, data, tr), scene_labels(data, tr),
                                       image_embeddings(m.params, data, te), scene_labels(data, te));
    MetricReport r{"linear_probe",
                   {{"accuracy", p.accuracy}, {"iterations", p.iterations}, {"final_grad_norm", p.final_grad_norm}},
                   json::object(), te.size(), report_config(c.s, c.command)};
    c.report(r);
    c.out << "linear probe accuracy " << fmt(p.accuracy) << " after " << p.iterations << " iterations\n";
    return 0;
}

int cmd_eval_retrieval(const Context& c) {
    const Checkpoint m = c.model();
    const Dataset data = c.dataset();
    const auto idx = data.indices(split_from_name(c.s.split));
    std::vector<std::string> captions;
    for (auto i : idx) captions.push_back(data.scenes[i].caption);
    const RecallResult rr =
        retrieval_recall(image_embeddings(m.params, data, idx), text_embeddings(m.params, m.vocab, captions), c.s.ks);
    json v = json::object();
    for (auto [k, x] : rr.i2t) v["i2t@" + std::to_string(k)] = x;
    for (auto [k, x] : rr.t2i) v["t2i@" + std::to_string(k)] = x;
    c.report({"retrieval_recall", v, json::object(), idx.size(), report_config(c.s, c.command)});
    for (auto& [k, x] : v.items()) c.out << k << " " << fmt(x.get<double>()) << "\n";
    return 0;
}

int cmd_eval_rationale_pred(const Context& c) {
    const Checkpoint m = c.model();
    const Dataset data = c.dataset();
    const auto idx = data.indices(split_from_name(c.s.split));
    const auto names = data.class_names();
    std::vector<std::vector<std::string>> sets;
    if (c.s.rationale_file.empty()) {
        for (const auto& cat : data.categories) sets.push_back(category_rationales(cat));
    } else {
        json j;
        try {
            j = json::parse(read_text_file(c.s.rationale_file));
        } catch (const json::exception& e) {
            throw FormatError(c.s.rationale_file + ": " + e.what());
        }
        for (const auto& n : names) {
            if (!j.contains(n) || !j[n].is_array() || j[n].empty()) {
                throw ArgumentError(c.s.rationale_file + ": no rationales for class '" + n + "'");
            }
            sets.push_back(j[n].get<std::vector<std::string>>());
        }
    }
    std::vector<Tensor> embs;
    for (const auto& s : sets) embs.push_back(text_embeddings(m.params, m.vocab, s));
    const auto labels = scene_labels(data, idx);
    const Tensor images = image_embeddings(m.params, data, idx);
    const double acc = rationale_based_accuracy(images, labels, embs);
    const double zs = zero_shot_accuracy(images, labels, class_embeddings(m.params, m.vocab, data));
    c.report({"rationale_based_accuracy", {{"accuracy", acc}, {"zeroshot_accuracy", zs}}, json::object(), idx.size(),
              report_config(c.s, c.command)});
    c.out << "rationale-based accuracy " << fmt(acc) << " (zero-shot " << fmt(zs) << ")\n";
    return 0;
}

int cmd_retrieve(const Context& c) {
    const Checkpoint m = c.model();
    const Dataset data = c.dataset();
    if (c.s.rationale.empty()) throw ArgumentError("--rationale is required");
    const auto idx = data.indices(split_from_name(c.s.split));
    if (c.s.k == 0 || c.s.k > idx.size()) throw ArgumentError("--k must be in 1.." + std::to_string(idx.size()));
    const std::vector<std::string> text{c.s.rationale};
    const Embedding r = row_embedding(text_embeddings(m.params, m.vocab, text), 0);
    const Tensor images = image_embeddings(m.params, data, idx);
    const std::size_t jd = m.params.config().joint_dim;
    std::vector<double> scores(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        for (std::size_t j = 0; j < jd; ++j) scores[i] += images[i * jd + j] * r.vector[j];
    }
    std::vector<std::size_t> order(idx.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
    json hits = json::array();
    for (std::size_t rank = 0; rank < c.s.k; ++rank) {
        const auto& scene = data.scenes[idx[order[rank]]];
        bool has = false;
        for (const auto& pm : scene.part_masks) has = has || pm.rationale == c.s.rationale;
        hits.push_back({{"rank", rank + 1}, {"scene", idx[order[rank]]}, {"category", scene.category},
                        {"score", scores[order[rank]]}, {"has_rationale", has}});
        write_ppm(c.out_dir() / ("rank_" + std::to_string(rank + 1) + ".ppm"), scene.image);
        c.out << rank + 1 << " scene " << idx[order[rank]] << " " << scene.category << " " << fmt(scores[order[rank]])
              << (has ? "" : " (rationale absent)") << "\n";
    }
    write_text_file(c.out_dir() / "retrieval.json", json{{"rationale", c.s.rationale}, {"hits", hits}}.dump(2) + "\n");
    return 0;
}

// Exit code 1 for problems with the caller's input, 2 for everything else.
int classify(const std::exception& e) {
    if (dynamic_cast<const NumericError*>(&e) || dynamic_cast<const StateError*>(&e) ||
        dynamic_cast<const DimensionError*>(&e)) {
        return 2;
    }
    if (dynamic_cast<const Error*>(&e) || dynamic_cast<const fs::filesystem_error*>(&e)) return 1;
    return 2;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    Settings s;
    try {
        if (auto path = config_path(args); !path.empty()) s = load_config_file(path);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }

    CLI::App app{"Rationale-grounded dual encoder: data, training, explanation and evaluation", "dcv"};
    app.require_subcommand(1);
    std::string config_file;
    // Global flags are accepted before or after the subcommand.
    auto globals = [&](CLI::App* a) {
        a->add_option("--config", config_file, "JSON file of settings (flags override it)");
        a->add_option("--seed", s.seed, "Seed for every random stream")->capture_default_str();
        a->add_option("--out", s.out, "Output directory")->capture_default_str();
        a->add_option("--threads", s.threads, "Worker threads (computation is serial; recorded for reproducibility)")
            ->capture_default_str()
            ->check(CLI::PositiveNumber);
        a->add_flag("--verbose", s.verbose, "Progress messages on stderr");
    };
    globals(&app);

    auto data_opt = [&](CLI::App* sub) { sub->add_option("--data", s.data, "Dataset directory (from gen-data)"); };
    auto ckpt_opt = [&](CLI::App* sub) { sub->add_option("--checkpoint", s.checkpoint, "Checkpoint directory"); };
    auto profile_opt = [&](CLI::App* sub) {
        sub->add_option("--profile", s.profile, "Directory with profile.json for layer weights (default uniform)");
    };
    auto split_opt = [&](CLI::App* sub) {
        sub->add_option("--split", s.split, "Split to evaluate")
            ->capture_default_str()
            ->check(CLI::IsMember({"train", "val", "test"}));
    };

    auto* gen = app.add_subcommand("gen-data", "Generate the synthetic part benchmark");
    gen->add_option("--n-per-class", s.n_per_class, "Scenes per category")->capture_default_str();
    gen->add_option("--noise", s.noise, "Background noise amplitude")->capture_default_str();
    gen->add_option("--distractor", s.distractor, "Probability of a distractor part")->capture_default_str();
    gen->add_option("--contrast-min", s.contrast_min, "Lowest part contrast")->capture_default_str();

    std::vector<std::string> tree_paths;
    auto* vo = app.add_subcommand("validate-ontology", "Parse and validate rationale trees");
    vo->add_option("paths", tree_paths, "Tree files or directories")->required();

    auto* tr = app.add_subcommand("train", "Train the dual encoder");
    data_opt(tr);
    profile_opt(tr);
    tr->add_option("--layers", s.layers, "Vision transformer layers")->capture_default_str();
    tr->add_option("--heads", s.heads, "Attention heads")->capture_default_str();
    tr->add_option("--width", s.width, "Model width")->capture_default_str();
    tr->add_option("--joint-dim", s.joint_dim, "Joint embedding size")->capture_default_str();
    tr->add_option("--patch-size", s.patch_size, "Patch side in pixels")->capture_default_str();
    tr->add_option("--text-layers", s.text_layers, "Text transformer layers")->capture_default_str();
    tr->add_option("--text-len", s.text_len, "Text context (0 fits the longest caption)")->capture_default_str();
    tr->add_option("--epochs", s.epochs, "Training epochs")->capture_default_str();
    tr->add_option("--batch-size", s.batch_size, "Batch size")->capture_default_str();
    tr->add_option("--lr", s.learning_rate, "Peak learning rate")->capture_default_str();
    tr->add_option("--lambda", s.lambda, "Disentanglement multiplier")->capture_default_str();
    tr->add_option("--gamma", s.gamma, "Reconstruction multiplier")->capture_default_str();
    tr->add_option("--epsilon", s.epsilon, "Disentanglement margin")->capture_default_str();
    tr->add_option("--delta", s.delta, "Reconstruction margin")->capture_default_str();
    tr->add_option("--temperature", s.temperature, "InfoNCE temperature")->capture_default_str();
    tr->add_option("--warmup", s.warmup_fraction, "Warmup fraction of all steps")->capture_default_str();
    tr->add_option("--weight-decay", s.weight_decay, "Decoupled weight decay")->capture_default_str();
    tr->add_option("--pairs", s.pairs_per_step, "Rationale pairs per image when there are more than 4 rationales")
        ->capture_default_str();
    tr->add_option("--tau", s.tau, "Fixed heatmap threshold (negative: mean + std per heatmap)")->capture_default_str();
    tr->add_option("--captions", s.captions, "Contrastive text: prompt, described or sampled")
        ->capture_default_str()
        ->check(CLI::IsMember({"prompt", "described", "sampled"}));
    tr->add_flag("--ablate-disen", s.ablate_disen, "Drop the disentanglement penalty (lambda = 0)");
    tr->add_flag("--ablate-recon", s.ablate_recon, "Drop the reconstruction penalty (gamma = 0)");

    auto* pr = app.add_subcommand("profile", "Accumulated mean-ablation of attention layers");
    ckpt_opt(pr);
    data_opt(pr);
    split_opt(pr);
    pr->add_option("--reference-split", s.reference_split, "Split whose mean effects replace the ablated ones")
        ->capture_default_str()
        ->check(CLI::IsMember({"train", "val", "test"}));
    pr->add_flag("--fallback-uniform", s.fallback_uniform, "Use uniform weights when no layer matters");

    auto* ex = app.add_subcommand("explain", "Heatmap and mask of one rationale on one image");
    ckpt_opt(ex);
    profile_opt(ex);
    ex->add_option("--image", s.image, "PPM image");
    ex->add_option("--rationale", s.rationale, "Rationale text");

    auto* seg = app.add_subcommand("eval-seg", "Rationale localization mIoU against part masks");
    auto* dis = app.add_subcommand("eval-disen", "Disentanglability of rationale heatmaps");
    auto* zs = app.add_subcommand("eval-zeroshot", "Zero-shot classification accuracy");
    auto* lp = app.add_subcommand("eval-probe", "Linear probe on frozen image embeddings");
    auto* rt = app.add_subcommand("eval-retrieval", "Image-text retrieval recall");
    auto* rp = app.add_subcommand("eval-rationale-pred", "Classification by mean rationale similarity");
    auto* rv = app.add_subcommand("retrieve", "Top-k images for a rationale");
    for (auto* sub : {seg, dis, zs, lp, rt, rp, rv}) {
        ckpt_opt(sub);
        data_opt(sub);
        split_opt(sub);
    }
    for (auto* sub : {seg, dis}) profile_opt(sub);
    for (auto* sub : app.get_subcommands({})) globals(sub);
    rt->add_option("--ks", s.ks, "Recall cutoffs")->capture_default_str()->delimiter(',');
    rp->add_option("--rationale-file", s.rationale_file, "JSON object: class name -> list of rationale strings");
    rv->add_option("--rationale", s.rationale, "Rationale text");
    rv->add_option("--k", s.k, "Images to return")->capture_default_str();

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        err << "run 'dcv --help' for usage\n";
        return 1;
    }

    CLI::App* sub = app.get_subcommands().front();
    Context c{s, sub->get_name(), out};
    set_log_level(s.verbose ? LogLevel::info : LogLevel::warning);
    try {
        c.snapshot();
        const std::string& n = c.command;
        if (n == "gen-data") return cmd_gen_data(c);
        if (n == "validate-ontology") return cmd_validate_ontology(c, tree_paths);
        if (n == "train") return cmd_train(c);
        if (n == "profile") return cmd_profile(c);
        if (n == "explain") return cmd_explain(c);
        if (n == "eval-seg") return cmd_eval_seg_disen(c, true);
        if (n == "eval-disen") return cmd_eval_seg_disen(c, false);
        if (n == "eval-zeroshot") return cmd_eval_zeroshot(c);
        if (n == "eval-probe") return cmd_eval_probe(c);
        if (n == "eval-retrieval") return cmd_eval_retrieval(c);
        if (n == "eval-rationale-pred") return cmd_eval_rationale_pred(c);
        if (n == "retrieve") return cmd_retrieve(c);
        throw StateError("unhandled subcommand " + n);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return classify(e);
    }
}

}  // namespace dcv::cli
