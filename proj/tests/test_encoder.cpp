#include <gtest/gtest.h>

#include <cmath>

#include "dcv/encoder.hpp"
#include "dcv/error.hpp"
#include "dcv/ops.hpp"
#include "dcv/tape.hpp"
#include "dcv/tokenizer.hpp"

using namespace dcv;

namespace {

EncoderConfig small_config() {
    EncoderConfig c;
    c.layers = 2;
    c.heads = 2;
    c.width = 16;
    c.patch_size = 4;
    c.image_side = 8;
    c.joint_dim = 8;
    c.mlp_ratio = 2;
    c.vocab_size = 12;
    c.text_len = 6;
    c.text_layers = 1;
    return c;
}

Image random_image(const EncoderConfig& c, Rng& rng) {
    Image img(c.image_side, c.image_side, c.channels);
    for (auto& p : img.pixels) p = rng.uniform();
    return img;
}

double max_abs(const Tensor& t) {
    double m = 0.0;
    for (double v : t.data()) m = std::max(m, std::abs(v));
    return m;
}

} // namespace

TEST(Encoder, LedgerSumsToEmbedding) {
    auto c = small_config();
    Rng rng(3);
    auto params = init_params(c, rng);
    for (int trial = 0; trial < 10; ++trial) {
        Image img = random_image(c, rng);
        auto enc = encode_image(img, params, true);
        ASSERT_TRUE(enc.ledger.has_value());
        Tensor total = enc.ledger->total();
        double diff = 0.0;
        for (std::size_t j = 0; j < c.joint_dim; ++j) {
            diff = std::max(diff, std::abs(total[j] - enc.embedding.vector[j]));
        }
        EXPECT_LE(diff / max_abs(enc.embedding.vector), 1e-5);
    }
}

TEST(Encoder, LedgerShapes) {
    auto c = small_config();
    Rng rng(4);
    auto params = init_params(c, rng);
    auto enc = encode_image(random_image(c, rng), params, true);
    EXPECT_EQ(enc.ledger->msa_terms.shape(), (Shape{2, 2, 5, 8}));
    EXPECT_EQ(enc.ledger->mlp_terms.shape(), (Shape{2, 8}));
    EXPECT_EQ(enc.ledger->input_term.shape(), (Shape{8}));
}

TEST(Encoder, LedgerRecordingDoesNotChangeEmbedding) {
    auto c = small_config();
    Rng rng(5);
    auto params = init_params(c, rng);
    Image img = random_image(c, rng);
    auto with = encode_image(img, params, true);
    auto without = encode_image(img, params, false);
    EXPECT_FALSE(without.ledger.has_value());
    EXPECT_TRUE(with.embedding.vector.bitwise_equal(without.embedding.vector));
}

TEST(Encoder, BatchingDoesNotChangeEmbedding) {
    auto c = small_config();
    Rng rng(6);
    auto params = init_params(c, rng);
    std::vector<Image> imgs;
    for (int i = 0; i < 5; ++i) imgs.push_back(random_image(c, rng));
    auto batched = encode_images(imgs, params, false, 5);
    auto single = encode_images(imgs, params, false, 1);
    for (std::size_t i = 0; i < imgs.size(); ++i) {
        EXPECT_TRUE(batched[i].embedding.vector.bitwise_equal(single[i].embedding.vector));
    }
}

TEST(Encoder, ZeroOutputProjectionGivesZeroMsaTerms) {
    auto c = small_config();
    Rng rng(7);
    auto params = init_params(c, rng);
    for (std::size_t l = 0; l < c.layers; ++l) {
        std::string p = "visual.block" + std::to_string(l) + ".";
        params.get(p + "out_w") = Tensor(params.get(p + "out_w").shape(), 0.0);
        params.get(p + "out_b") = Tensor(params.get(p + "out_b").shape(), 0.0);
    }
    auto enc = encode_image(random_image(c, rng), params, true);
    EXPECT_EQ(max_abs(enc.ledger->msa_terms), 0.0);
}

TEST(Encoder, GraphContributionsMatchLedger) {
    auto c = small_config();
    Rng rng(8);
    auto params = init_params(c, rng);
    std::vector<Image> imgs = {random_image(c, rng), random_image(c, rng)};
    Tensor patches = patchify(c, imgs);
    VisualTrace trace = visual_forward(params, patches);
    std::vector<double> w = {0.25, 0.75};
    Tensor contrib = weighted_token_contributions(params, trace, w);
    ASSERT_EQ(contrib.shape(), (Shape{2, 5, 8}));
    for (std::size_t b = 0; b < 2; ++b) {
        auto ledger = build_ledger(params, trace, b);
        for (std::size_t i = 0; i < 5; ++i) {
            for (std::size_t j = 0; j < 8; ++j) {
                double expect = 0.0;
                for (std::size_t l = 0; l < 2; ++l) {
                    for (std::size_t m = 0; m < 2; ++m) {
                        expect += w[l] * ledger.msa_terms.data()[((l * 2 + m) * 5 + i) * 8 + j];
                    }
                }
                EXPECT_NEAR(contrib.data()[(b * 5 + i) * 8 + j], expect, 1e-9);
            }
        }
    }
}

TEST(Encoder, ContributionsAreDifferentiable) {
    auto c = small_config();
    Rng rng(9);
    auto params = init_params(c, rng);
    Image img = random_image(c, rng);
    Tape tape;
    TapeScope scope(tape);
    Tensor w = tape.leaf(params.get("visual.block1.out_w"));
    params.get("visual.block1.out_w") = w;
    VisualTrace trace = visual_forward(params, patchify(c, std::span<const Image>(&img, 1)));
    std::vector<double> lw = {1.0, 1.0};
    Tensor loss = ops::sum(ops::reshape(weighted_token_contributions(params, trace, lw), Shape{40}), 0);
    auto grads = tape.backward(loss);
    EXPECT_GT(max_abs(grad_of(grads, w)), 0.0);
}

TEST(Encoder, RejectsMismatchedImage) {
    auto c = small_config();
    Rng rng(10);
    auto params = init_params(c, rng);
    Image img(16, 16, 3, 0.5);
    EXPECT_THROW(encode_image(img, params, false), ConfigError);
    Image bad = random_image(c, rng);
    bad.pixels[0] = 1.5;
    EXPECT_THROW(encode_image(bad, params, false), ArgumentError);
}

TEST(Encoder, ConfigValidation) {
    auto c = small_config();
    c.heads = 3;
    EXPECT_THROW(c.validate(), ConfigError);
    c = small_config();
    c.patch_size = 3;
    EXPECT_THROW(c.validate(), ConfigError);
    c = small_config();
    c.layers = 0;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Encoder, TextIsDeterministicAndOrderIndependent) {
    auto c = small_config();
    Rng rng(11);
    auto params = init_params(c, rng);
    std::vector<TokenIds> texts = {{1, 2, 3}, {4}, {5, 6, 7}, {8, 9}};
    Tensor all = encode_texts(params, texts);
    for (std::size_t i = 0; i < texts.size(); ++i) {
        Embedding one = encode_text(texts[i], params);
        for (std::size_t j = 0; j < c.joint_dim; ++j) {
            EXPECT_EQ(all.data()[i * c.joint_dim + j], one.vector[j]);
        }
    }
    EXPECT_TRUE(encode_text(texts[0], params).vector.bitwise_equal(encode_text(texts[0], params).vector));
}

TEST(Encoder, TextRejectsBadSequences) {
    auto c = small_config();
    Rng rng(12);
    auto params = init_params(c, rng);
    EXPECT_THROW(encode_text(TokenIds{}, params), ArgumentError);
    EXPECT_THROW(encode_text(TokenIds(7, 1), params), ArgumentError);
    EXPECT_THROW(encode_text(TokenIds{99}, params), ArgumentError);
}

TEST(Encoder, InitIsSeedDeterministic) {
    auto c = small_config();
    Rng a(1), b(1), other(2);
    EXPECT_TRUE(init_params(c, a).bitwise_equal(init_params(c, b)));
    EXPECT_FALSE(init_params(c, a).bitwise_equal(init_params(c, other)));
}

TEST(Tokenizer, SplitsAndLowercases) {
    auto words = split_words("A photo of a Zebra, zzz-unseen!");
    std::vector<std::string> expect = {"a", "photo", "of", "a", "zebra", "zzz-unseen"};
    EXPECT_EQ(words, expect);
}

TEST(Tokenizer, UnknownWordsMapToOov) {
    auto vocab = Vocabulary::from_corpus(std::vector<std::string>{"a photo of a zebra"});
    auto ids = vocab.tokenize("a photo of a zzz-unseen");
    ASSERT_EQ(ids.size(), 5u);
    EXPECT_EQ(ids[4], Vocabulary::kOovId);
    EXPECT_NE(ids[0], Vocabulary::kOovId);
    EXPECT_EQ(ids[0], ids[3]);
}
