#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dcv/tape.hpp"
#include "dcv/tensor.hpp"

// Differentiable tensor operations. Every op records a node on the active tape
// (see TapeScope) when at least one input is tracked, and throws
// NumericError if it produces a non-finite value from finite inputs.
namespace dcv::ops {

inline constexpr double kLayerNormEps = 1e-5;

/// Matrix product over the last two axes. `b` may be a plain matrix, in which
/// case every leading axis of `a` is folded into rows; otherwise both operands
/// must share identical leading (batch) axes.
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);

// Elementwise with right-aligned broadcasting of size-1 or missing axes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double factor);
Tensor relu(const Tensor& a);
Tensor reciprocal(const Tensor& a);
/// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
Tensor gelu(const Tensor& a);

Tensor softmax(const Tensor& a, int axis = -1);
Tensor mean(const Tensor& a, int axis, bool keepdim = false);
Tensor sum(const Tensor& a, int axis, bool keepdim = false);

/// Normalizes over the last axis with a learned per-feature gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = kLayerNormEps);
Tensor l2_normalize(const Tensor& a);
/// Euclidean norm over the last axis. The gradient at the origin is taken as 0.
Tensor norm(const Tensor& a);
/// Dot product over the last axis.
Tensor inner(const Tensor& a, const Tensor& b);

Tensor concat(std::span<const Tensor> parts, int axis);
Tensor slice(const Tensor& a, int axis, std::size_t start, std::size_t length);
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, std::span<const std::size_t> perm);

/// Rows of `table` ([V, D]) selected by `ids`, shape [ids.size(), D].
Tensor embedding(const Tensor& table, std::span<const std::size_t> ids);
/// Mean softmax cross-entropy of `logits` ([n, C]) against class `targets`.
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets);

/// Final-layernorm fold for direct-effect attribution. `parts` has shape
/// lead + [T, D], `reference` lead + [D] is the full pre-norm activation whose
/// statistics are used for every part: gain * (part - mean(part)) / std(reference).
/// Summing the folded parts plus the layernorm bias reproduces layer_norm(reference).
Tensor ln_fold(const Tensor& parts, const Tensor& reference, const Tensor& gain, double eps = kLayerNormEps);

} // namespace dcv::ops

namespace dcv {

struct OpAttrs {
    int axis = -1;
    bool keepdim = false;
    double factor = 1.0;
    double eps = ops::kLayerNormEps;
    std::size_t start = 0;
    std::size_t length = 0;
    bool trans_a = false;
    bool trans_b = false;
    Shape shape;
    std::vector<std::size_t> perm;
    std::vector<std::size_t> ids;
};

/// Uniform entry point over every op kind; dispatches to dcv::ops.
Tensor apply(OpKind kind, std::span<const Tensor> inputs, const OpAttrs& attrs = {});

} // namespace dcv
