#include "dcv/explain.hpp"

#include <cmath>
#include <cstdio>

#include "dcv/checkpoint.hpp"
#include "dcv/error.hpp"
#include "dcv/netpbm.hpp"

namespace dcv {

namespace fs = std::filesystem;

Tensor token_contributions(const ResidualLedger& ledger, std::span<const double> w) {
    const std::size_t layers = ledger.layers();
    if (w.size() != layers) {
        throw ArgumentError("got " + std::to_string(w.size()) + " layer weights for a " + std::to_string(layers) +
                            "-layer ledger");
    }
    const std::size_t heads = ledger.heads();
    const std::size_t t = ledger.tokens();
    const std::size_t j = ledger.joint_dim();
    Tensor out(Shape{t, j});
    auto o = out.mutable_data();
    auto m = ledger.msa_terms.data();
    for (std::size_t l = 0; l < layers; ++l) {
        for (std::size_t h = 0; h < heads; ++h) {
            const double* src = m.data() + (l * heads + h) * t * j;
            for (std::size_t k = 0; k < t * j; ++k) o[k] += w[l] * src[k];
        }
    }
    return out;
}

Heatmap heatmap(const Tensor& contributions, const Embedding& rationale) {
    const auto& r = rationale.vector;
    if (contributions.rank() != 2 || r.rank() != 1 || contributions.shape()[1] != r.size()) {
        throw ArgumentError("heatmap: contributions " + shape_string(contributions.shape()) +
                            " do not match rationale embedding " + shape_string(r.shape()));
    }
    double sq = 0.0;
    for (double v : r.data()) sq += v * v;
    if (!rationale.normalized || std::abs(std::sqrt(sq) - 1.0) > 1e-9) {
        throw ArgumentError("heatmap: rationale embedding must be L2-normalized");
    }
    const std::size_t t = contributions.shape()[0];
    const std::size_t j = r.size();
    if (t < 2) throw ArgumentError("heatmap: no spatial tokens");
    Heatmap h;
    h.grid = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(t - 1))));
    if (h.grid * h.grid != t - 1) throw ArgumentError("heatmap: spatial tokens do not form a square grid");
    auto c = contributions.data();
    auto rv = r.data();
    for (std::size_t i = 1; i < t; ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < j; ++k) s += c[i * j + k] * rv[k];
        h.values.push_back(s);
    }
    return h;
}

Mask BinaryMask::pixels(std::size_t patch_size) const { return expand_mask(grid, patch_size); }

double dynamic_threshold(std::span<const double> values) {
    if (values.empty()) throw ArgumentError("dynamic threshold of an empty heatmap");
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    double var = 0.0;
    for (double v : values) var += (v - mean) * (v - mean);
    var /= static_cast<double>(values.size());
    return mean + std::sqrt(var);
}

std::size_t argmax(std::span<const double> values) {
    if (values.empty()) throw ArgumentError("argmax of an empty list");
    std::size_t best = 0;
    for (std::size_t i = 1; i < values.size(); ++i) {
        if (values[i] > values[best]) best = i;
    }
    return best;
}

BinaryMask threshold_mask(const Heatmap& h, double tau) {
    if (h.grid * h.grid != h.values.size()) throw ArgumentError("heatmap grid does not match its values");
    BinaryMask m{Mask(h.grid, h.grid), tau, false};
    for (std::size_t i = 0; i < h.values.size(); ++i) {
        if (h.values[i] > tau) m.grid.cells[i] = true;
    }
    if (m.grid.count() == 0) {
        m.grid.cells[argmax(h.values)] = true;
        m.fallback = true;
    }
    return m;
}

BinaryMask dynamic_mask(Heatmap& h) {
    h.tau_used = dynamic_threshold(h.values);
    return threshold_mask(h, h.tau_used);
}

Embedding rationale_embedding_h(const Tensor& contributions, const Heatmap& h, double tau) {
    if (contributions.rank() != 2 || contributions.shape()[0] != h.values.size() + 1) {
        throw ArgumentError("contributions " + shape_string(contributions.shape()) + " do not match a heatmap of " +
                            std::to_string(h.values.size()) + " tokens");
    }
    const std::size_t j = contributions.shape()[1];
    auto c = contributions.data();
    Tensor out(Shape{j});
    auto o = out.mutable_data();
    bool any = false;
    for (std::size_t i = 0; i < h.values.size(); ++i) {
        if (!(h.values[i] > tau)) continue;
        any = true;
        for (std::size_t k = 0; k < j; ++k) o[k] += c[(i + 1) * j + k];
    }
    if (!any) {
        const std::size_t i = argmax(h.values);
        for (std::size_t k = 0; k < j; ++k) o[k] = c[(i + 1) * j + k];
    }
    return Embedding{std::move(out), false};
}

void export_heatmap(const Heatmap& h, std::size_t patch_size, const fs::path& dir, const std::string& stem) {
    fs::create_directories(dir);
    write_pgm(dir / (stem + ".pgm"), h.grid, h.grid, h.values);
    const std::size_t side = h.grid * patch_size;
    std::vector<double> pixels(side * side);
    for (std::size_t y = 0; y < side; ++y) {
        for (std::size_t x = 0; x < side; ++x) pixels[y * side + x] = h.values[(y / patch_size) * h.grid + x / patch_size];
    }
    write_pgm(dir / (stem + "_pixels.pgm"), side, side, pixels);
    std::string csv = "row,col,value\n";
    char buf[64];
    for (std::size_t i = 0; i < h.values.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.17g", h.values[i]);
        csv += std::to_string(i / h.grid) + "," + std::to_string(i % h.grid) + "," + buf + "\n";
    }
    write_text_file(dir / (stem + ".csv"), csv);
}

void export_mask(const BinaryMask& m, std::size_t patch_size, const fs::path& dir, const std::string& stem) {
    fs::create_directories(dir);
    write_pbm(dir / (stem + ".pbm"), m.pixels(patch_size));
    write_pbm(dir / (stem + "_grid.pbm"), m.grid);
}

} // namespace dcv
