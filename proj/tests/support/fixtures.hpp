#pragma once

// Shared by the unit tests and the acceptance runner.

#include <functional>
#include <span>
#include <vector>

#include "dcv/encoder.hpp"
#include "dcv/rng.hpp"
#include "dcv/trainer.hpp"

namespace dcv::testing {

Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0);

// Reduces an op output to a scalar with a fixed random weighting so every
// output element contributes to the checked gradient.
Tensor weighted_sum(const Tensor& out, const Tensor& weights);

struct OpCase {
    const char* name;
    std::vector<Shape> input_shapes;
    std::function<Tensor(std::span<const Tensor>)> op;
};

/// One case per differentiable op kind (several for matmul layouts).
std::vector<OpCase> op_cases();

/// Worst relative error of `c` over `trials` random inputs.
double op_grad_error(const OpCase& c, Rng& rng, int trials);

// A model small enough for finite differences over every parameter.
struct MicroSetup {
    EncoderConfig config;
    std::vector<Image> images;
    std::vector<TrainExample> examples;
    std::vector<const TrainExample*> batch;
};

MicroSetup micro(std::size_t n_images, std::uint64_t seed);

/// Margins that keep both hinges active so every path carries gradient.
TrainerConfig loose_margins();

/// Worst relative error of the full objective gradient on `s`.
double objective_grad_error(const MicroSetup& s, std::uint64_t seed);

} // namespace dcv::testing
