#include "dcv/profile.hpp"

#include <sstream>

#include "dcv/checkpoint.hpp"
#include "dcv/error.hpp"
#include "dcv/metrics.hpp"
#include "dcv/ops.hpp"
#include "dcv/pipeline.hpp"
#include "dcv/tape.hpp"

namespace dcv {

Tensor compute_mean_effects(const ModelParams& params, std::span<const Image* const> images) {
    if (images.empty()) throw ArgumentError("compute_mean_effects: empty dataset");
    const EncoderConfig& ec = params.config();
    Tensor sum(Shape{ec.layers, ec.joint_dim});
    NoGradScope ng;
    for_each_encoding(params, images, true, [&](std::size_t, const ImageEncoding& enc) {
        auto s = sum.mutable_data();
        for (std::size_t l = 0; l < ec.layers; ++l) {
            const Tensor effect = enc.ledger->layer_msa(l);
            for (std::size_t j = 0; j < ec.joint_dim; ++j) s[l * ec.joint_dim + j] += effect[j];
        }
    });
    auto s = sum.mutable_data();
    for (auto& v : s) v /= static_cast<double>(images.size());
    return sum;
}

std::vector<double> accumulated_ablation_curve(const ModelParams& params, std::span<const Image* const> images,
                                               std::span<const std::size_t> labels, const Tensor& class_embs,
                                               const Tensor& means) {
    const EncoderConfig& ec = params.config();
    if (means.shape() != Shape{ec.layers, ec.joint_dim}) {
        throw ArgumentError("ablation: means " + shape_string(means.shape()) + " do not match the model (" +
                            std::to_string(ec.layers) + " layers, joint " + std::to_string(ec.joint_dim) + ")");
    }
    if (labels.size() != images.size()) throw ArgumentError("ablation: label count mismatch");
    const std::size_t n = images.size(), jd = ec.joint_dim;
    // embs[l] holds the ablated embeddings with layers 1..l replaced.
    std::vector<std::vector<double>> embs(ec.layers + 1, std::vector<double>(n * jd));
    NoGradScope ng;
    for_each_encoding(params, images, true, [&](std::size_t k, const ImageEncoding& enc) {
        std::vector<double> e(enc.embedding.vector.data().begin(), enc.embedding.vector.data().end());
        for (std::size_t l = 0; l <= ec.layers; ++l) {
            if (l > 0) {
                const Tensor effect = enc.ledger->layer_msa(l - 1);
                for (std::size_t j = 0; j < jd; ++j) e[j] += means[(l - 1) * jd + j] - effect[j];
            }
            const Tensor unit = ops::l2_normalize(Tensor(Shape{jd}, e));
            std::copy(unit.data().begin(), unit.data().end(), embs[l].begin() + static_cast<std::ptrdiff_t>(k * jd));
        }
    });
    std::vector<double> curve;
    for (auto& e : embs) curve.push_back(zero_shot_accuracy(Tensor(Shape{n, jd}, std::move(e)), labels, class_embs));
    return curve;
}

std::vector<double> curve_deltas(std::span<const double> curve) {
    std::vector<double> d;
    for (std::size_t l = 1; l < curve.size(); ++l) d.push_back(std::max(0.0, curve[l - 1] - curve[l]));
    return d;
}

std::vector<double> layer_weights(std::span<const double> deltas) {
    double total = 0.0;
    for (double d : deltas) total += std::max(0.0, d);
    if (!(total > 0.0)) throw DegenerateProfileError("every layer's accuracy drop is zero; no layer weights can be derived");
    std::vector<double> w;
    for (double d : deltas) w.push_back(std::max(0.0, d) / total);
    return w;
}

AblationProfile profile_model(const ModelParams& params, std::span<const Image* const> reference,
                              std::span<const Image* const> eval, std::span<const std::size_t> labels,
                              const Tensor& class_embs, bool fallback_uniform) {
    AblationProfile p;
    p.means = compute_mean_effects(params, reference);
    p.curve = accumulated_ablation_curve(params, eval, labels, class_embs, p.means);
    p.deltas = curve_deltas(p.curve);
    try {
        p.weights = layer_weights(p.deltas);
    } catch (const DegenerateProfileError&) {
        if (!fallback_uniform) throw;
        p.weights.assign(p.deltas.size(), 1.0 / static_cast<double>(p.deltas.size()));
        p.uniform_fallback = true;
    }
    return p;
}

std::string ablation_csv(const AblationProfile& p) {
    std::ostringstream out;
    out.precision(17);
    out << "l,accuracy,delta,weight\n";
    for (std::size_t l = 0; l < p.curve.size(); ++l) {
        out << l << ',' << p.curve[l] << ',';
        if (l > 0) out << p.deltas[l - 1] << ',' << p.weights[l - 1];
        else out << ',';
        out << '\n';
    }
    return out.str();
}

void save_profile(const AblationProfile& p, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    TensorBundle b{"dcv-profile-v1",
                   {{"curve", p.curve}, {"deltas", p.deltas}, {"weights", p.weights}, {"uniform_fallback", p.uniform_fallback}},
                   {{"means", p.means}}};
    save_bundle(b, dir / "profile.json", dir / "profile.bin");
}

AblationProfile load_profile(const std::filesystem::path& dir) {
    TensorBundle b = load_bundle(dir / "profile.json", dir / "profile.bin", "dcv-profile-v1");
    AblationProfile p;
    try {
        p.curve = b.meta.at("curve").get<std::vector<double>>();
        p.deltas = b.meta.at("deltas").get<std::vector<double>>();
        p.weights = b.meta.at("weights").get<std::vector<double>>();
        p.uniform_fallback = b.meta.value("uniform_fallback", false);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("profile.json: ") + e.what());
    }
    for (auto& [name, t] : b.tensors) {
        if (name == "means") p.means = t;
    }
    if (p.means.rank() != 2 || p.deltas.size() != p.means.shape()[0] || p.weights.size() != p.deltas.size() ||
        p.curve.size() != p.deltas.size() + 1) {
        throw FormatError("profile: inconsistent layer counts");
    }
    return p;
}

} // namespace dcv
