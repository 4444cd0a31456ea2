#include "support/fixtures.hpp"

#include "dcv/grad_check.hpp"
#include "dcv/ops.hpp"
#include "dcv/tape.hpp"

namespace dcv::testing {

Tensor random_tensor(Rng& rng, Shape shape, double scale) {
    Tensor t(std::move(shape));
    for (auto& v : t.mutable_data()) v = rng.normal() * scale;
    return t;
}

Tensor weighted_sum(const Tensor& out, const Tensor& weights) {
    const Tensor flat = ops::reshape(out, Shape{out.size()});
    return ops::inner(flat, weights);
}

std::vector<OpCase> op_cases() {
    static const std::vector<std::size_t> ids = {2, 0, 2, 1};
    static const std::vector<std::size_t> targets = {3, 0, 1};
    static const std::vector<std::size_t> perm = {2, 0, 1};
    return {
        {"matmul", {{2, 3}, {3, 4}}, [](auto in) { return ops::matmul(in[0], in[1]); }},
        {"matmul_tt", {{3, 2}, {4, 3}}, [](auto in) { return ops::matmul(in[0], in[1], true, true); }},
        {"matmul_batched", {{2, 3, 4}, {2, 5, 4}}, [](auto in) { return ops::matmul(in[0], in[1], false, true); }},
        {"matmul_folded", {{2, 3, 4}, {4, 2}}, [](auto in) { return ops::matmul(in[0], in[1]); }},
        {"add_bias", {{3, 4}, {4}}, [](auto in) { return ops::add(in[0], in[1]); }},
        {"sub", {{3, 4}, {3, 4}}, [](auto in) { return ops::sub(in[0], in[1]); }},
        {"mul_broadcast", {{2, 3, 4}, {2, 3, 1}}, [](auto in) { return ops::mul(in[0], in[1]); }},
        {"scale", {{5}}, [](auto in) { return ops::scale(in[0], -1.7); }},
        {"softmax_axis0", {{4, 3}}, [](auto in) { return ops::softmax(in[0], 0); }},
        {"softmax_last", {{2, 5}}, [](auto in) { return ops::softmax(in[0], -1); }},
        {"layer_norm", {{3, 6}, {6}, {6}}, [](auto in) { return ops::layer_norm(in[0], in[1], in[2]); }},
        {"gelu", {{7}}, [](auto in) { return ops::gelu(in[0]); }},
        {"mean_axis1", {{3, 4, 2}}, [](auto in) { return ops::mean(in[0], 1); }},
        {"sum_axis0", {{3, 4}}, [](auto in) { return ops::sum(in[0], 0, true); }},
        {"l2_normalize", {{3, 5}}, [](auto in) { return ops::l2_normalize(in[0]); }},
        {"norm", {{3, 5}}, [](auto in) { return ops::norm(in[0]); }},
        {"inner", {{3, 5}, {3, 5}}, [](auto in) { return ops::inner(in[0], in[1]); }},
        {"concat", {{2, 3}, {2, 2}}, [](auto in) { return ops::concat(in, 1); }},
        {"slice", {{4, 5}}, [](auto in) { return ops::slice(in[0], 1, 1, 3); }},
        {"embedding", {{3, 4}}, [](auto in) { return ops::embedding(in[0], ids); }},
        {"cross_entropy", {{3, 4}}, [](auto in) { return ops::cross_entropy(in[0], targets); }},
        {"relu", {{9}}, [](auto in) { return ops::relu(in[0]); }},
        {"permute", {{2, 3, 4}}, [](auto in) { return ops::permute(in[0], perm); }},
        {"reciprocal", {{4}}, [](auto in) { return ops::reciprocal(ops::add(ops::mul(in[0], in[0]), Tensor::scalar(0.5))); }},
        {"ln_fold", {{2, 3, 5}, {2, 5}, {5}}, [](auto in) { return ops::ln_fold(in[0], in[1], in[2]); }},
    };
}

double op_grad_error(const OpCase& c, Rng& rng, int trials) {
    double worst = 0.0;
    for (int trial = 0; trial < trials; ++trial) {
        std::vector<Tensor> params;
        for (const auto& s : c.input_shapes) params.push_back(random_tensor(rng, s));
        Shape out_shape;
        {
            NoGradScope off;
            out_shape = c.op(params).shape();
        }
        const Tensor weights = random_tensor(rng, {shape_size(out_shape)});
        const auto r = grad_check([&](std::span<const Tensor> p) { return weighted_sum(c.op(p), weights); }, params, 1e-5);
        worst = std::max(worst, r.max_rel_error);
    }
    return worst;
}

MicroSetup micro(std::size_t n_images, std::uint64_t seed) {
    MicroSetup s;
    s.config.layers = 1;
    s.config.heads = 1;
    s.config.width = 4;
    s.config.patch_size = 2;
    s.config.image_side = 4;
    s.config.joint_dim = 3;
    s.config.mlp_ratio = 1;
    s.config.vocab_size = 8;
    s.config.text_len = 4;
    s.config.text_layers = 1;
    Rng rng(seed);
    for (std::size_t i = 0; i < n_images; ++i) {
        Image img(4, 4, 3);
        for (auto& p : img.pixels) p = rng.uniform();
        s.images.push_back(img);
    }
    for (std::size_t i = 0; i < n_images; ++i) {
        TrainExample ex;
        ex.id = "img" + std::to_string(i);
        ex.image = &s.images[i];
        ex.captions = {{1, 2, static_cast<std::size_t>(3 + i)}};
        ex.category = {1, static_cast<std::size_t>(3 + i)};
        ex.rationales = {{5, 6}, {7}, {6, 7}};
        s.examples.push_back(ex);
    }
    for (auto& ex : s.examples) s.batch.push_back(&ex);
    return s;
}

TrainerConfig loose_margins() {
    TrainerConfig c;
    c.epsilon = 5.0;
    c.delta = 0.0;
    c.lambda = 0.7;
    c.gamma = 0.3;
    return c;
}

double objective_grad_error(const MicroSetup& s, std::uint64_t seed) {
    Rng rng(seed);
    auto params = init_params(s.config, rng);
    const TrainerConfig cfg = loose_margins();
    Rng plan_rng(seed + 1);
    const StepPlan plan = objective(params, s.batch, cfg, plan_rng).plan;
    std::vector<Tensor> leaves;
    for (std::size_t i = 0; i < params.size(); ++i) leaves.push_back(params.at(i));
    auto fn = [&](std::span<const Tensor> p) {
        ModelParams live = params;
        for (std::size_t i = 0; i < p.size(); ++i) live.at(i) = p[i];
        Rng unused(0);
        return objective(live, s.batch, cfg, unused, &plan).loss;
    };
    return grad_check(fn, leaves, 1e-5).max_rel_error;
}

} // namespace dcv::testing
