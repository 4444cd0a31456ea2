#include <gtest/gtest.h>

#include <filesystem>

#include "dcv/bench.hpp"
#include "dcv/error.hpp"
#include "dcv/netpbm.hpp"

using namespace dcv;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("dcv_bench_" + name);
    fs::remove_all(p);
    return p;
}

bool disjoint(const Mask& a, const Mask& b) {
    for (std::size_t i = 0; i < a.cells.size(); ++i) {
        if (a.cells[i] && b.cells[i]) return false;
    }
    return true;
}

} // namespace

TEST(Bench, SceneIsDeterministic) {
    auto cats = default_categories();
    auto a = gen_scene(cats[2], 2, 99);
    auto b = gen_scene(cats[2], 2, 99);
    EXPECT_EQ(a.image.pixels, b.image.pixels);
    ASSERT_EQ(a.part_masks.size(), b.part_masks.size());
    for (std::size_t k = 0; k < a.part_masks.size(); ++k) EXPECT_EQ(a.part_masks[k].mask, b.part_masks[k].mask);
    EXPECT_EQ(a.caption, "a photo of a Crane");
}

TEST(Bench, InfeasibleLayoutIsGenerationError) {
    CategorySpec spec{"Blob", {}, "uniform-noise"};
    spec.parts.push_back({"Body", "Body is Huge", "checker-rc", 32, Placement{0, 0, 0, 0, 8}});
    spec.parts.push_back({"Head", "Head is Red", "hstripe-gm", 8, Placement{}});
    EXPECT_THROW(gen_scene(spec, 0, 1), GenerationError);
}

TEST(Bench, DefaultSpecMasksAreDisjointAndNonEmpty) {
    auto cats = default_categories();
    for (std::size_t c = 0; c < cats.size(); ++c) {
        auto s = gen_scene(cats[c], c, 0);
        ASSERT_EQ(s.part_masks.size(), 5u);
        for (std::size_t i = 0; i < s.part_masks.size(); ++i) {
            EXPECT_GE(s.part_masks[i].mask.count(), 64u);
            for (std::size_t j = i + 1; j < s.part_masks.size(); ++j) {
                EXPECT_TRUE(disjoint(s.part_masks[i].mask, s.part_masks[j].mask));
            }
            if (s.distractor) {
                EXPECT_TRUE(disjoint(s.part_masks[i].mask, *s.distractor));
            }
        }
    }
}

TEST(Bench, DefaultSpecSharesEveryPhraseFourTimes) {
    std::map<std::string, int> uses;
    for (const auto& c : default_categories()) {
        for (const auto& p : c.parts) ++uses[p.phrase];
        validate_spec(c, BenchOptions{}, nullptr);
        auto tree = category_tree(c);
        EXPECT_TRUE(validate(tree).empty());
        validate_spec(c, BenchOptions{}, &tree);
    }
    EXPECT_EQ(uses.size(), 10u);
    for (const auto& [phrase, n] : uses) EXPECT_EQ(n, 4) << phrase;
}

TEST(Bench, SpecPhraseMustBeInTree) {
    auto c = default_categories()[0];
    auto tree = category_tree(default_categories()[1]);
    EXPECT_THROW(validate_spec(c, BenchOptions{}, &tree), ValidationError);
}

TEST(Bench, SplitSizes) {
    auto d = gen_dataset(default_categories(), 10, 5);
    EXPECT_EQ(d.scenes.size(), 80u);
    EXPECT_EQ(d.indices(Split::train).size(), 56u);
    EXPECT_EQ(d.indices(Split::val).size(), 12u);
    EXPECT_EQ(d.indices(Split::test).size(), 12u);
}

TEST(Bench, SeedsGiveDifferentScenes) {
    auto a = gen_dataset(default_categories(), 2, 1);
    auto b = gen_dataset(default_categories(), 2, 2);
    for (std::size_t i = 0; i < a.scenes.size(); ++i) EXPECT_NE(a.scenes[i].image.pixels, b.scenes[i].image.pixels);
}

TEST(Bench, WriteReadAndRegenerate) {
    auto dir = scratch("roundtrip");
    auto d = gen_dataset(default_categories(), 3, 11);
    write_dataset(d, dir);
    auto back = read_dataset(dir);
    auto regen = regenerate_dataset(dir);
    ASSERT_EQ(back.scenes.size(), d.scenes.size());
    for (std::size_t i = 0; i < d.scenes.size(); ++i) {
        // Pixels are stored quantized to 1/255, so the PPM round trip is exact.
        EXPECT_EQ(back.scenes[i].image.pixels, d.scenes[i].image.pixels);
        EXPECT_EQ(regen.scenes[i].image.pixels, d.scenes[i].image.pixels);
        EXPECT_EQ(back.splits[i], d.splits[i]);
        for (std::size_t k = 0; k < 5; ++k) {
            EXPECT_EQ(back.scenes[i].part_masks[k].mask, d.scenes[i].part_masks[k].mask);
        }
        EXPECT_EQ(back.scenes[i].distractor.has_value(), d.scenes[i].distractor.has_value());
    }
    EXPECT_TRUE(fs::exists(dir / "categories" / "auk.spec.json"));
    EXPECT_TRUE(fs::exists(dir / "categories" / "auk.json"));
}

TEST(Netpbm, MaskExpansionAndIo) {
    Mask m(2, 2);
    m.set(0, 1);
    auto big = expand_mask(m, 3);
    EXPECT_EQ(big.count(), 9u);
    EXPECT_TRUE(big.at(2, 5));
    EXPECT_FALSE(big.at(3, 5));
    auto dir = scratch("pbm");
    fs::create_directories(dir);
    write_pbm(dir / "m.pbm", big);
    EXPECT_EQ(read_pbm(dir / "m.pbm"), big);
}

TEST(Netpbm, TruncatedPpmIsFormatError) {
    auto dir = scratch("ppm");
    Image img(4, 4, 3, 0.25);
    write_ppm(dir / "a.ppm", img);
    fs::resize_file(dir / "a.ppm", fs::file_size(dir / "a.ppm") - 3);
    EXPECT_THROW(read_ppm(dir / "a.ppm"), FormatError);
}
