#pragma once

#include <functional>
#include <span>
#include <vector>

#include "dcv/tensor.hpp"

namespace dcv {

/// Scalar-valued function of a parameter list. It must build its result from
/// the given tensors with dcv::ops so the tape can see the dependence.
using ScalarFunction = std::function<Tensor(std::span<const Tensor> params)>;

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_param = 0;    // index into params
    std::size_t worst_element = 0;  // flat index inside that parameter
    double analytic = 0.0;
    double numeric = 0.0;
};

/// Compares reverse-mode gradients against central differences with the given
/// step. The per-element error is |a - c| / max(|a|, |c|, 1e-12).
GradCheckResult grad_check(const ScalarFunction& fn, std::span<const Tensor> params, double step);

} // namespace dcv
