#include "dcv/bench.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <set>

#include "dcv/checkpoint.hpp"
#include "dcv/error.hpp"
#include "dcv/netpbm.hpp"
#include "dcv/rng.hpp"

namespace dcv {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

using Rgb = std::array<double, 3>;

struct Appearance {
    std::string pattern;
    Rgb a;
    Rgb b;
};

const std::map<std::string, Rgb>& colour_pairs() {
    static const std::map<std::string, Rgb> pairs = {
        {"rc", {1.0, 0.0, 0.0}},  // red / cyan
        {"gm", {0.0, 1.0, 0.0}},  // green / magenta
        {"by", {0.0, 0.0, 1.0}},  // blue / yellow
    };
    return pairs;
}

const std::vector<std::string>& patterns() {
    static const std::vector<std::string> p = {"hstripe", "vstripe", "checker", "diag", "quad"};
    return p;
}

Appearance appearance(const std::string& id) {
    const auto dash = id.find('-');
    if (dash == std::string::npos) throw ValidationError("unknown appearance generator '" + id + "'");
    const auto pattern = id.substr(0, dash);
    const auto pair = colour_pairs().find(id.substr(dash + 1));
    if (pair == colour_pairs().end() ||
        std::find(patterns().begin(), patterns().end(), pattern) == patterns().end()) {
        throw ValidationError("unknown appearance generator '" + id + "'");
    }
    const Rgb a = pair->second;
    return {pattern, a, {1.0 - a[0], 1.0 - a[1], 1.0 - a[2]}};
}

bool pattern_bit(const std::string& pattern, std::size_t y, std::size_t x, std::size_t size) {
    if (pattern == "hstripe") return y % 2;
    if (pattern == "vstripe") return x % 2;
    if (pattern == "checker") return (y + x) % 2;
    if (pattern == "diag") return ((y + x) / 2) % 2;
    return ((2 * y / size) + (2 * x / size)) % 2;  // quad
}

double quantize(double v) { return std::lround(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

struct Rect {
    std::size_t y, x, size;
    bool overlaps(const Rect& o) const {
        return y < o.y + o.size && o.y < y + size && x < o.x + o.size && o.x < x + size;
    }
};

std::vector<std::size_t> lattice(std::size_t lo, std::size_t hi, std::size_t align, std::size_t limit) {
    std::vector<std::size_t> out;
    const std::size_t step = std::max<std::size_t>(align, 1);
    const std::size_t first = (lo + step - 1) / step * step;
    for (std::size_t v = first; v <= std::min(hi, limit); v += step) out.push_back(v);
    return out;
}

std::optional<Rect> sample_rect(const Placement& p, std::size_t size, std::size_t side, Rng& rng) {
    if (size > side) return std::nullopt;
    const auto ys = lattice(p.y_min, p.y_max, p.align, side - size);
    const auto xs = lattice(p.x_min, p.x_max, p.align, side - size);
    if (ys.empty() || xs.empty()) return std::nullopt;
    return Rect{ys[rng.below(ys.size())], xs[rng.below(xs.size())], size};
}

Mask rect_mask(const Rect& r, std::size_t side) {
    Mask m(side, side);
    for (std::size_t y = r.y; y < r.y + r.size; ++y) {
        for (std::size_t x = r.x; x < r.x + r.size; ++x) m.set(y, x);
    }
    return m;
}

void paint(Image& img, const Rect& r, const Appearance& look, double contrast) {
    for (std::size_t y = 0; y < r.size; ++y) {
        for (std::size_t x = 0; x < r.size; ++x) {
            const Rgb& c = pattern_bit(look.pattern, y, x, r.size) ? look.b : look.a;
            for (std::size_t ch = 0; ch < 3; ++ch) {
                // The background noise already sits in the pixel; keep it.
                double& px = img.at(r.y + y, r.x + x, ch);
                px = quantize(px + contrast * (c[ch] - 0.5));
            }
        }
    }
}

} // namespace

const Mask& SyntheticScene::mask_for(const std::string& rationale) const {
    for (const auto& pm : part_masks) {
        if (pm.rationale == rationale) return pm.mask;
    }
    throw ArgumentError("scene has no rationale '" + rationale + "'");
}

std::vector<std::string> appearance_ids() {
    std::vector<std::string> ids;
    for (const auto& p : patterns()) {
        for (const auto& [c, rgb] : colour_pairs()) ids.push_back(p + "-" + c);
    }
    return ids;
}

void validate_spec(const CategorySpec& spec, const BenchOptions& options, const RationaleTree* tree) {
    if (spec.name.empty()) throw ValidationError("category spec without a name");
    if (spec.parts.empty()) throw ValidationError("category '" + spec.name + "' has no parts");
    if (spec.background != "uniform-noise") {
        throw ValidationError("category '" + spec.name + "': unknown background '" + spec.background + "'");
    }
    std::set<std::string> names;
    std::set<std::string> phrases;
    for (const auto& p : spec.parts) {
        if (!names.insert(p.part_name).second) {
            throw ValidationError("category '" + spec.name + "' repeats part '" + p.part_name + "'");
        }
        if (!phrases.insert(normalize_phrase(p.phrase)).second) {
            throw ValidationError("category '" + spec.name + "' repeats phrase '" + p.phrase + "'");
        }
        appearance(p.generator);
        if (p.size == 0 || p.size > options.image_side) {
            throw ValidationError("part '" + p.part_name + "' size " + std::to_string(p.size) +
                                  " does not fit the image");
        }
    }
    if (tree) {
        std::set<std::string> known;
        for (const auto& r : enumerate_rationales(*tree)) known.insert(normalize_phrase(r.text));
        for (const auto& p : spec.parts) {
            if (!known.count(normalize_phrase(p.phrase))) {
                throw ValidationError("phrase '" + p.phrase + "' of category '" + spec.name +
                                      "' is not a rationale of its tree");
            }
        }
    }
}

SyntheticScene gen_scene(const CategorySpec& spec, std::size_t label, std::uint64_t seed, const BenchOptions& o) {
    validate_spec(spec, o);
    const std::size_t side = o.image_side;
    Rng root(seed);
    Rng layout = root.split(1);
    Rng looks = root.split(2);
    Rng noise = root.split(3);
    Rng extra = root.split(4);

    std::vector<Rect> rects;
    for (std::size_t attempt = 0; attempt < o.max_attempts && rects.size() != spec.parts.size(); ++attempt) {
        rects.clear();
        for (const auto& p : spec.parts) {
            auto r = sample_rect(p.placement, p.size, side, layout);
            if (!r) break;
            if (std::any_of(rects.begin(), rects.end(), [&](const Rect& q) { return q.overlaps(*r); })) break;
            rects.push_back(*r);
        }
    }
    if (rects.size() != spec.parts.size()) {
        throw GenerationError("no disjoint layout for category '" + spec.name + "' after " +
                              std::to_string(o.max_attempts) + " attempts");
    }

    SyntheticScene s;
    s.category = spec.name;
    s.label = label;
    s.caption = "a photo of a " + spec.name;
    s.seed = seed;
    s.image = Image(side, side, 3);
    for (auto& px : s.image.pixels) px = quantize(0.5 + noise.uniform(-o.noise_amplitude, o.noise_amplitude));

    for (std::size_t k = 0; k < spec.parts.size(); ++k) {
        const double contrast = looks.uniform(o.contrast_min, 1.0);
        paint(s.image, rects[k], appearance(spec.parts[k].generator), contrast);
        s.part_masks.push_back({spec.parts[k].phrase, rect_mask(rects[k], side)});
    }

    if (extra.uniform() < o.distractor_probability) {
        std::set<std::string> own;
        for (const auto& p : spec.parts) own.insert(p.generator);
        std::vector<std::string> pool;
        for (const auto& id : appearance_ids()) {
            if (!own.count(id)) pool.push_back(id);
        }
        const std::size_t size = spec.parts.front().size;
        Placement anywhere{0, side, 0, side, spec.parts.front().placement.align};
        for (std::size_t attempt = 0; attempt < o.max_attempts && !pool.empty(); ++attempt) {
            auto r = sample_rect(anywhere, size, side, extra);
            if (!r) break;
            if (std::any_of(rects.begin(), rects.end(), [&](const Rect& q) { return q.overlaps(*r); })) continue;
            paint(s.image, *r, appearance(pool[extra.below(pool.size())]), extra.uniform(o.contrast_min, 1.0));
            s.distractor = rect_mask(*r, side);
            break;
        }
    }
    return s;
}

std::vector<CategorySpec> default_categories() {
    struct Phrase {
        const char* part;
        const char* attribute;
        const char* generator;
    };
    static const Phrase pool[10] = {
        {"Crest", "Red", "hstripe-rc"},     {"Beak", "Long", "vstripe-gm"},    {"Wing", "Spotted", "checker-by"},
        {"Tail", "Forked", "diag-rc"},      {"Eye", "Round", "quad-gm"},       {"Breast", "Yellow", "hstripe-by"},
        {"Neck", "Striped", "vstripe-rc"},  {"Leg", "Dark", "checker-gm"},     {"Belly", "Pale", "diag-by"},
        {"Feet", "Webbed", "quad-rc"},
    };
    // Each phrase appears in exactly 4 categories; any two categories share at most 3.
    static const std::array<std::array<int, 5>, 8> members = {{
        {0, 2, 3, 7, 8}, {0, 1, 2, 4, 6}, {0, 1, 5, 6, 8}, {3, 6, 7, 8, 9},
        {2, 4, 5, 8, 9}, {0, 3, 4, 7, 9}, {1, 3, 4, 5, 7}, {1, 2, 5, 6, 9},
    }};
    static const char* names[8] = {"Auk", "Bittern", "Crane", "Dunlin", "Egret", "Finch", "Grebe", "Heron"};
    std::vector<CategorySpec> out;
    for (std::size_t c = 0; c < 8; ++c) {
        CategorySpec spec;
        spec.name = names[c];
        for (int k : members[c]) {
            const auto& p = pool[k];
            spec.parts.push_back({p.part, std::string(p.part) + " is " + p.attribute, p.generator, 8, Placement{}});
        }
        out.push_back(std::move(spec));
    }
    return out;
}

RationaleTree category_tree(const CategorySpec& spec) {
    RationaleTree t;
    t.nodes.push_back({spec.name, spec.name});
    for (const auto& p : spec.parts) t.nodes.push_back({p.part_name, p.part_name});
    std::set<std::string> leaves;
    for (const auto& p : spec.parts) {
        const auto attribute = p.phrase.substr(p.phrase.rfind(' ') + 1);
        if (leaves.insert(attribute).second) t.nodes.push_back({attribute, attribute});
    }
    for (const auto& p : spec.parts) t.edges.push_back({spec.name, p.part_name, "has"});
    for (const auto& p : spec.parts) {
        // "<Part> <relation> <Attribute>"
        const auto first = p.phrase.find(' ');
        const auto last = p.phrase.rfind(' ');
        const auto relation = last > first ? p.phrase.substr(first + 1, last - first - 1) : std::string("is");
        t.edges.push_back({p.part_name, p.phrase.substr(last + 1), relation});
    }
    return t;
}

json options_to_json(const BenchOptions& o) {
    return {{"image_side", o.image_side},
            {"noise_amplitude", o.noise_amplitude},
            {"distractor_probability", o.distractor_probability},
            {"contrast_min", o.contrast_min},
            {"max_attempts", o.max_attempts}};
}

BenchOptions options_from_json(const json& j) {
    BenchOptions o;
    o.image_side = j.value("image_side", o.image_side);
    o.noise_amplitude = j.value("noise_amplitude", o.noise_amplitude);
    o.distractor_probability = j.value("distractor_probability", o.distractor_probability);
    o.contrast_min = j.value("contrast_min", o.contrast_min);
    o.max_attempts = j.value("max_attempts", o.max_attempts);
    return o;
}

json spec_to_json(const CategorySpec& spec) {
    json parts = json::array();
    for (const auto& p : spec.parts) {
        parts.push_back({{"part_name", p.part_name},
                         {"phrase", p.phrase},
                         {"generator", p.generator},
                         {"size", p.size},
                         {"placement",
                          {{"y_min", p.placement.y_min},
                           {"y_max", p.placement.y_max},
                           {"x_min", p.placement.x_min},
                           {"x_max", p.placement.x_max},
                           {"align", p.placement.align}}}});
    }
    return {{"name", spec.name}, {"background", spec.background}, {"parts", parts}};
}

CategorySpec spec_from_json(const json& j) {
    try {
        CategorySpec spec;
        spec.name = j.at("name").get<std::string>();
        spec.background = j.value("background", spec.background);
        for (const auto& p : j.at("parts")) {
            PartSpec part;
            part.part_name = p.at("part_name").get<std::string>();
            part.phrase = p.at("phrase").get<std::string>();
            part.generator = p.at("generator").get<std::string>();
            part.size = p.value("size", part.size);
            if (p.contains("placement")) {
                const auto& q = p["placement"];
                part.placement.y_min = q.value("y_min", part.placement.y_min);
                part.placement.y_max = q.value("y_max", part.placement.y_max);
                part.placement.x_min = q.value("x_min", part.placement.x_min);
                part.placement.x_max = q.value("x_max", part.placement.x_max);
                part.placement.align = q.value("align", part.placement.align);
            }
            spec.parts.push_back(std::move(part));
        }
        return spec;
    } catch (const json::exception& e) {
        throw SchemaError(std::string("category spec: ") + e.what());
    }
}

const char* split_name(Split s) {
    switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    }
    return "?";
}

Split split_from_name(const std::string& name) {
    if (name == "train") return Split::train;
    if (name == "val") return Split::val;
    if (name == "test") return Split::test;
    throw FormatError("unknown split '" + name + "'");
}

std::vector<std::size_t> Dataset::indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < splits.size(); ++i) {
        if (splits[i] == s) out.push_back(i);
    }
    return out;
}

std::vector<std::string> Dataset::class_names() const {
    std::vector<std::string> out;
    for (const auto& c : categories) out.push_back(c.name);
    return out;
}

namespace {

std::uint64_t scene_seed(std::uint64_t seed, std::size_t label, std::size_t index) {
    return Rng(seed).split(label).split(index).next_u64();
}

std::vector<Split> assign_splits(const std::vector<SyntheticScene>& scenes) {
    const std::size_t n = scenes.size();
    std::vector<std::pair<std::uint64_t, std::size_t>> order;
    for (std::size_t i = 0; i < n; ++i) order.emplace_back(Rng(scenes[i].seed).split(0x5e1).next_u64(), i);
    std::sort(order.begin(), order.end());
    const auto train_end = static_cast<std::size_t>(std::llround(0.70 * static_cast<double>(n)));
    const auto val_end = static_cast<std::size_t>(std::llround(0.85 * static_cast<double>(n)));
    std::vector<Split> out(n);
    for (std::size_t r = 0; r < n; ++r) {
        out[order[r].second] = r < train_end ? Split::train : (r < val_end ? Split::val : Split::test);
    }
    return out;
}

std::string scene_id(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "scene_%05zu", i);
    return buf;
}

} // namespace

Dataset gen_dataset(const std::vector<CategorySpec>& categories, std::size_t n_per_class, std::uint64_t seed,
                    const BenchOptions& options) {
    if (n_per_class == 0) throw ArgumentError("n_per_class must be >= 1");
    if (categories.empty()) throw ArgumentError("no categories");
    Dataset d;
    d.categories = categories;
    d.options = options;
    d.seed = seed;
    d.n_per_class = n_per_class;
    for (std::size_t c = 0; c < categories.size(); ++c) {
        for (std::size_t i = 0; i < n_per_class; ++i) {
            try {
                d.scenes.push_back(gen_scene(categories[c], c, scene_seed(seed, c, i), options));
            } catch (const GenerationError& e) {
                throw GenerationError("scene " + std::to_string(d.scenes.size()) + ": " + e.what());
            }
        }
    }
    d.splits = assign_splits(d.scenes);
    return d;
}

void write_dataset(const Dataset& d, const fs::path& dir) {
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "masks");
    fs::create_directories(dir / "categories");
    json cats = json::array();
    for (const auto& c : d.categories) {
        const auto stem = normalize_phrase(c.name);
        write_text_file(dir / "categories" / (stem + ".spec.json"), spec_to_json(c).dump(2) + "\n");
        write_text_file(dir / "categories" / (stem + ".json"), serialize_tree(category_tree(c)));
        cats.push_back(spec_to_json(c));
    }
    json scenes = json::array();
    for (std::size_t i = 0; i < d.scenes.size(); ++i) {
        const auto& s = d.scenes[i];
        const auto id = scene_id(i);
        write_ppm(dir / "images" / (id + ".ppm"), s.image);
        json parts = json::array();
        for (std::size_t k = 0; k < s.part_masks.size(); ++k) {
            const auto file = "masks/" + id + "_p" + std::to_string(k) + ".pbm";
            write_pbm(dir / file, s.part_masks[k].mask);
            parts.push_back({{"rationale", s.part_masks[k].rationale}, {"mask", file}});
        }
        json distractor = nullptr;
        if (s.distractor) {
            distractor = "masks/" + id + "_distractor.pbm";
            write_pbm(dir / distractor.get<std::string>(), *s.distractor);
        }
        scenes.push_back({{"id", id},
                          {"image", "images/" + id + ".ppm"},
                          {"category", s.category},
                          {"label", s.label},
                          {"seed", s.seed},
                          {"split", split_name(d.splits[i])},
                          {"caption", s.caption},
                          {"parts", parts},
                          {"distractor", distractor}});
    }
    json manifest = {{"format", "dcv-bench-v1"}, {"seed", d.seed},       {"n_per_class", d.n_per_class},
                     {"options", options_to_json(d.options)}, {"categories", cats}, {"scenes", scenes}};
    write_text_file(dir / "manifest.json", manifest.dump(1) + "\n");
}

namespace {

json read_manifest(const fs::path& dir, Dataset& d) {
    json m;
    try {
        m = json::parse(read_text_file(dir / "manifest.json"));
        if (m.at("format") != "dcv-bench-v1") throw FormatError("unexpected manifest format");
        d.seed = m.at("seed").get<std::uint64_t>();
        d.n_per_class = m.at("n_per_class").get<std::size_t>();
        d.options = options_from_json(m.at("options"));
        for (const auto& c : m.at("categories")) d.categories.push_back(spec_from_json(c));
    } catch (const json::exception& e) {
        throw FormatError((dir / "manifest.json").string() + ": " + e.what());
    }
    return m;
}

} // namespace

Dataset read_dataset(const fs::path& dir) {
    Dataset d;
    const json m = read_manifest(dir, d);
    try {
        for (const auto& e : m.at("scenes")) {
            SyntheticScene s;
            s.image = read_ppm(dir / e.at("image").get<std::string>());
            s.category = e.at("category").get<std::string>();
            s.label = e.at("label").get<std::size_t>();
            s.seed = e.at("seed").get<std::uint64_t>();
            s.caption = e.at("caption").get<std::string>();
            for (const auto& p : e.at("parts")) {
                s.part_masks.push_back(
                    {p.at("rationale").get<std::string>(), read_pbm(dir / p.at("mask").get<std::string>())});
            }
            if (!e.at("distractor").is_null()) s.distractor = read_pbm(dir / e["distractor"].get<std::string>());
            if (s.label >= d.categories.size()) throw FormatError("scene label out of range");
            d.scenes.push_back(std::move(s));
            d.splits.push_back(split_from_name(e.at("split").get<std::string>()));
        }
    } catch (const json::exception& e) {
        throw FormatError((dir / "manifest.json").string() + ": " + e.what());
    }
    return d;
}

Dataset regenerate_dataset(const fs::path& dir) {
    Dataset d;
    const json m = read_manifest(dir, d);
    try {
        for (const auto& e : m.at("scenes")) {
            const auto label = e.at("label").get<std::size_t>();
            if (label >= d.categories.size()) throw FormatError("scene label out of range");
            d.scenes.push_back(gen_scene(d.categories[label], label, e.at("seed").get<std::uint64_t>(), d.options));
            d.splits.push_back(split_from_name(e.at("split").get<std::string>()));
        }
    } catch (const json::exception& e) {
        throw FormatError((dir / "manifest.json").string() + ": " + e.what());
    }
    return d;
}

} // namespace dcv
