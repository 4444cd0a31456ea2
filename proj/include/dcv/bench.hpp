#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "dcv/image.hpp"
#include "dcv/ontology.hpp"

namespace dcv {

/// Where a part may be placed: an inclusive rectangle of top-left pixel
/// positions, sampled on a lattice of `align` pixels.
struct Placement {
    std::size_t y_min = 0;
    std::size_t y_max = 24;
    std::size_t x_min = 0;
    std::size_t x_max = 24;
    std::size_t align = 8;
};

struct PartSpec {
    std::string part_name;
    std::string phrase;     // rationale text, e.g. "Crest is Red"
    std::string generator;  // appearance id, see appearance_ids()
    std::size_t size = 8;   // square side in pixels
    Placement placement;
};

struct CategorySpec {
    std::string name;
    std::vector<PartSpec> parts;
    std::string background = "uniform-noise";
};

struct BenchOptions {
    std::size_t image_side = 32;
    double noise_amplitude = 0.1;      // background is 0.5 +- amplitude
    double distractor_probability = 0.25;
    double contrast_min = 0.5;         // per-part contrast drawn from [min, 1]
    std::size_t max_attempts = 100;
};

struct SceneMask {
    std::string rationale;
    Mask mask;  // pixel grid
};

struct SyntheticScene {
    Image image;
    std::string category;
    std::size_t label = 0;
    std::string caption;
    std::vector<SceneMask> part_masks;  // spec part order
    std::optional<Mask> distractor;
    std::uint64_t seed = 0;

    const Mask& mask_for(const std::string& rationale) const;
};

/// Appearance generators: two complementary colours in a fixed pattern, so
/// every part has the same mean colour as the background.
std::vector<std::string> appearance_ids();

/// Throws ValidationError on duplicate part names, unknown generators,
/// parts larger than the image, or (when given) phrases missing from `tree`.
void validate_spec(const CategorySpec& spec, const BenchOptions& options, const RationaleTree* tree = nullptr);

/// Deterministic in (spec, seed, options). Throws GenerationError when no
/// disjoint layout is found within options.max_attempts.
SyntheticScene gen_scene(const CategorySpec& spec, std::size_t label, std::uint64_t seed,
                         const BenchOptions& options = {});

/// The default 8-category benchmark: 10 shared (part, attribute) phrases,
/// 5 per category, each phrase used by 4 categories.
std::vector<CategorySpec> default_categories();

/// Ontology of a category: root -has-> part -is-> attribute.
RationaleTree category_tree(const CategorySpec& spec);

nlohmann::json spec_to_json(const CategorySpec& spec);
CategorySpec spec_from_json(const nlohmann::json& j);
nlohmann::json options_to_json(const BenchOptions& options);
BenchOptions options_from_json(const nlohmann::json& j);

enum class Split { train, val, test };
const char* split_name(Split s);
Split split_from_name(const std::string& name);

struct Dataset {
    std::vector<CategorySpec> categories;
    BenchOptions options;
    std::uint64_t seed = 0;
    std::size_t n_per_class = 0;
    std::vector<SyntheticScene> scenes;
    std::vector<Split> splits;  // parallel to scenes

    std::vector<std::size_t> indices(Split s) const;
    std::vector<std::string> class_names() const;
};

/// Scene seeds derive from (seed, class, index); the split sorts scenes by a
/// hash of their seed and cuts at round(0.7 n) and round(0.85 n).
Dataset gen_dataset(const std::vector<CategorySpec>& categories, std::size_t n_per_class, std::uint64_t seed,
                    const BenchOptions& options = {});

/// Writes images/, masks/, categories/ (spec + tree per category) and manifest.json.
void write_dataset(const Dataset& data, const std::filesystem::path& dir);
/// Reads a dataset written by write_dataset (images and masks from disk).
Dataset read_dataset(const std::filesystem::path& dir);
/// Rebuilds every scene from the manifest seeds alone.
Dataset regenerate_dataset(const std::filesystem::path& dir);

} // namespace dcv
