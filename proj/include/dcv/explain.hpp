#pragma once

#include <cstddef>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "dcv/encoder.hpp"
#include "dcv/image.hpp"

namespace dcv {

/// e_i = sum_l w_l sum_m msa_terms[l][m][i], for every token i (class token
/// first), as a [T, J] tensor.
Tensor token_contributions(const ResidualLedger& ledger, std::span<const double> layer_weights);

struct Heatmap {
    std::vector<double> values;  // spatial tokens only, row-major over the patch grid
    std::size_t grid = 0;        // patches per side
    std::string image_id;
    std::string rationale;
    double tau_used = std::numeric_limits<double>::quiet_NaN();
};

/// values[i - 1] = <e_i, r> for spatial tokens. `rationale` must be normalized.
Heatmap heatmap(const Tensor& contributions, const Embedding& rationale);

struct BinaryMask {
    Mask grid;              // patch grid
    double tau = 0.0;
    bool fallback = false;  // no value exceeded tau; the first argmax cell was used

    Mask pixels(std::size_t patch_size) const;
};

/// mu + sigma with the population standard deviation.
double dynamic_threshold(std::span<const double> values);
/// Cells with value > tau, falling back to the first argmax cell when empty.
BinaryMask threshold_mask(const Heatmap& heatmap, double tau);
/// threshold_mask at mu + sigma; records the threshold in heatmap.tau_used.
BinaryMask dynamic_mask(Heatmap& heatmap);

std::size_t argmax(std::span<const double> values);

/// Sum of e_i over spatial tokens whose heatmap value exceeds tau, or the
/// argmax token's e_i when none does.
Embedding rationale_embedding_h(const Tensor& contributions, const Heatmap& heatmap, double tau);

/// Writes <stem>.pgm (patch grid), <stem>_pixels.pgm, <stem>.csv (raw values)
/// and, for the mask, <stem>.pbm (pixels) and <stem>_grid.pbm.
void export_heatmap(const Heatmap& heatmap, std::size_t patch_size, const std::filesystem::path& dir,
                    const std::string& stem);
void export_mask(const BinaryMask& mask, std::size_t patch_size, const std::filesystem::path& dir,
                 const std::string& stem);

} // namespace dcv
