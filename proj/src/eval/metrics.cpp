#include "dcv/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dcv/checkpoint.hpp"
#include "dcv/error.hpp"

namespace dcv {

std::optional<double> iou(const Mask& a, const Mask& b) {
    if (a.height != b.height || a.width != b.width) {
        throw ArgumentError("iou: mask " + std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
                            std::to_string(b.height) + "x" + std::to_string(b.width));
    }
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.cells.size(); ++i) {
        inter += a.cells[i] && b.cells[i];
        uni += a.cells[i] || b.cells[i];
    }
    if (uni == 0) return std::nullopt;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

IouResult miou(std::span<const MaskSample> samples) {
    std::map<std::string, std::pair<double, std::size_t>> acc;
    IouResult r;
    for (const auto& s : samples) {
        auto v = iou(s.pred, s.gt);
        if (!v) {
            ++r.skipped;
            continue;
        }
        auto& [sum, n] = acc[s.part];
        sum += *v;
        ++n;
        ++r.samples;
    }
    for (const auto& [part, sn] : acc) {
        r.per_part[part] = sn.first / static_cast<double>(sn.second);
        r.mean += r.per_part[part];
    }
    if (!acc.empty()) r.mean /= static_cast<double>(acc.size());
    return r;
}

std::optional<double> pair_disentanglability(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ArgumentError("disentanglability: heatmap lengths differ");
    double na = 0.0, nb = 0.0, dot = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        na += a[i] * a[i];
        nb += b[i] * b[i];
        dot += a[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return std::nullopt;
    const double cos = dot / (std::sqrt(na) * std::sqrt(nb));
    return std::clamp(1.0 - std::abs(cos), 0.0, 1.0);
}

DisenResult disentanglability(const std::vector<std::vector<std::vector<double>>>& heatmaps) {
    DisenResult r;
    double total = 0.0;
    for (std::size_t img = 0; img < heatmaps.size(); ++img) {
        const auto& maps = heatmaps[img];
        if (maps.size() < 2) {
            throw ArgumentError("disentanglability: image " + std::to_string(img) + " has fewer than 2 heatmaps");
        }
        double sum = 0.0;
        std::size_t n = 0;
        for (std::size_t a = 0; a < maps.size(); ++a) {
            for (std::size_t b = a + 1; b < maps.size(); ++b) {
                if (auto v = pair_disentanglability(maps[a], maps[b])) {
                    sum += *v;
                    ++n;
                } else {
                    ++r.skipped_pairs;
                }
            }
        }
        if (n == 0) continue;
        total += sum / static_cast<double>(n);
        ++r.images;
    }
    if (r.images) r.value = total / static_cast<double>(r.images);
    return r;
}

namespace {

void check_pair(const Tensor& a, const Tensor& b, const char* what) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1]) {
        throw ArgumentError(std::string(what) + ": embeddings " + shape_string(a.shape()) + " and " +
                            shape_string(b.shape()) + " do not share a width");
    }
}

double dot(const double* a, const double* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t k = 0; k < n; ++k) s += a[k] * b[k];
    return s;
}

} // namespace

std::vector<std::size_t> predict_classes(const Tensor& images, const Tensor& classes) {
    check_pair(images, classes, "predict_classes");
    const std::size_t n = images.shape()[0], c = classes.shape()[0], j = images.shape()[1];
    std::vector<std::size_t> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        double best = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < c; ++k) {
            const double s = dot(images.data().data() + i * j, classes.data().data() + k * j, j);
            if (s > best) {
                best = s;
                out[i] = k;
            }
        }
    }
    return out;
}

double accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> labels) {
    if (predicted.size() != labels.size()) throw ArgumentError("accuracy: prediction/label count mismatch");
    if (labels.empty()) throw ArgumentError("accuracy: no samples");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hit += predicted[i] == labels[i];
    return static_cast<double>(hit) / static_cast<double>(labels.size());
}

double zero_shot_accuracy(const Tensor& images, std::span<const std::size_t> labels, const Tensor& classes) {
    for (auto l : labels) {
        if (l >= classes.shape()[0]) throw ArgumentError("zero_shot_accuracy: label without a class prompt");
    }
    return accuracy(predict_classes(images, classes), labels);
}

double rationale_based_accuracy(const Tensor& images, std::span<const std::size_t> labels,
                                std::span<const Tensor> rationale_embs) {
    const std::size_t c = rationale_embs.size();
    for (auto l : labels) {
        if (l >= c) throw ArgumentError("rationale_based_accuracy: missing rationale set for class " + std::to_string(l));
    }
    for (std::size_t k = 0; k < c; ++k) {
        if (rationale_embs[k].rank() != 2 || rationale_embs[k].shape()[0] == 0) {
            throw ArgumentError("rationale_based_accuracy: class " + std::to_string(k) + " has no rationales");
        }
        check_pair(images, rationale_embs[k], "rationale_based_accuracy");
    }
    const std::size_t n = images.shape()[0], j = images.shape()[1];
    std::vector<std::size_t> pred(n);
    for (std::size_t i = 0; i < n; ++i) {
        double best = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < c; ++k) {
            const auto& r = rationale_embs[k];
            double s = 0.0;
            for (std::size_t q = 0; q < r.shape()[0]; ++q) s += dot(images.data().data() + i * j, r.data().data() + q * j, j);
            s /= static_cast<double>(r.shape()[0]);
            if (s > best) {
                best = s;
                pred[i] = k;
            }
        }
    }
    return accuracy(pred, labels);
}

ProbeResult linear_probe(const Tensor& train_x, std::span<const std::size_t> train_y, const Tensor& test_x,
                         std::span<const std::size_t> test_y, std::size_t max_iters, double tol) {
    check_pair(train_x, test_x, "linear_probe");
    const std::size_t n = train_x.shape()[0], d = train_x.shape()[1];
    if (train_y.size() != n || test_y.size() != test_x.shape()[0]) throw ArgumentError("linear_probe: label count mismatch");
    std::size_t classes = 0;
    for (auto y : train_y) classes = std::max(classes, y + 1);
    for (auto y : test_y) classes = std::max(classes, y + 1);
    {
        bool varied = false;
        for (auto y : train_y) varied = varied || y != train_y[0];
        if (!varied) throw ArgumentError("linear_probe: training set has a single class");
    }
    const std::size_t dp = d + 1;  // bias feature
    auto x = train_x.data();
    double max_sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) max_sq = std::max(max_sq, dot(x.data() + i * d, x.data() + i * d, d) + 1.0);
    // Softmax cross-entropy has Hessian bounded by 0.5 * max ||x||^2.
    const double lr = 1.0 / (0.5 * max_sq);
    std::vector<double> w(classes * dp, 0.0), grad(classes * dp), p(classes);
    ProbeResult r;
    for (r.iterations = 0; r.iterations < max_iters; ++r.iterations) {
        std::fill(grad.begin(), grad.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const double* xi = x.data() + i * d;
            double m = -std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < classes; ++c) {
                p[c] = dot(w.data() + c * dp, xi, d) + w[c * dp + d];
                m = std::max(m, p[c]);
            }
            double z = 0.0;
            for (std::size_t c = 0; c < classes; ++c) z += (p[c] = std::exp(p[c] - m));
            for (std::size_t c = 0; c < classes; ++c) {
                const double g = (p[c] / z - (train_y[i] == c ? 1.0 : 0.0)) / static_cast<double>(n);
                double* gc = grad.data() + c * dp;
                for (std::size_t k = 0; k < d; ++k) gc[k] += g * xi[k];
                gc[d] += g;
            }
        }
        r.final_grad_norm = std::sqrt(dot(grad.data(), grad.data(), grad.size()));
        if (r.final_grad_norm < tol) break;
        for (std::size_t k = 0; k < w.size(); ++k) w[k] -= lr * grad[k];
    }
    auto tx = test_x.data();
    std::vector<std::size_t> pred(test_y.size());
    for (std::size_t i = 0; i < test_y.size(); ++i) {
        double best = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < classes; ++c) {
            const double s = dot(w.data() + c * dp, tx.data() + i * d, d) + w[c * dp + d];
            if (s > best) {
                best = s;
                pred[i] = c;
            }
        }
    }
    r.accuracy = accuracy(pred, test_y);
    return r;
}

std::size_t rank_of(std::span<const double> scores, std::size_t target) {
    std::size_t rank = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (scores[i] > scores[target] || (scores[i] == scores[target] && i < target)) ++rank;
    }
    return rank;
}

RecallResult retrieval_recall(const Tensor& images, const Tensor& texts, std::span<const std::size_t> ks) {
    check_pair(images, texts, "retrieval_recall");
    const std::size_t n = images.shape()[0], j = images.shape()[1];
    if (texts.shape()[0] != n) throw ArgumentError("retrieval_recall: image and text counts differ");
    for (auto k : ks) {
        if (k == 0 || k > n) throw ArgumentError("retrieval_recall: K=" + std::to_string(k) + " outside 1.." + std::to_string(n));
    }
    std::vector<double> sim(n * n);
    for (std::size_t a = 0; a < n; ++a) {
        for (std::size_t b = 0; b < n; ++b) sim[a * n + b] = dot(images.data().data() + a * j, texts.data().data() + b * j, j);
    }
    std::vector<std::size_t> i2t_rank(n), t2i_rank(n);
    std::vector<double> col(n);
    for (std::size_t a = 0; a < n; ++a) {
        i2t_rank[a] = rank_of(std::span<const double>(sim.data() + a * n, n), a);
        for (std::size_t b = 0; b < n; ++b) col[b] = sim[b * n + a];
        t2i_rank[a] = rank_of(col, a);
    }
    RecallResult r;
    for (auto k : ks) {
        std::size_t hi = 0, ht = 0;
        for (std::size_t a = 0; a < n; ++a) {
            hi += i2t_rank[a] < k;
            ht += t2i_rank[a] < k;
        }
        r.i2t[k] = static_cast<double>(hi) / static_cast<double>(n);
        r.t2i[k] = static_cast<double>(ht) / static_cast<double>(n);
    }
    return r;
}

nlohmann::json MetricReport::to_json() const {
    return {{"metric", metric},
            {"config_hash", json_hash(config)},
            {"config", config},
            {"sample_count", sample_count},
            {"values", values},
            {"breakdown", breakdown}};
}

} // namespace dcv
