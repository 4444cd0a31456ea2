#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dcv/tensor.hpp"

namespace dcv {

enum class OpKind {
    leaf,
    matmul,
    add,
    sub,
    mul,
    scale,
    softmax,
    layer_norm,
    gelu,
    mean,
    sum,
    l2_normalize,
    norm,
    inner,
    concat,
    slice,
    embedding,
    cross_entropy,
    relu,
    reshape,
    permute,
    reciprocal,
    ln_fold,
};

const char* op_name(OpKind kind);

using GradientMap = std::map<NodeId, Tensor>;

/// Accumulates input gradients while a node's backward rule runs.
class GradSink {
public:
    explicit GradSink(std::vector<std::optional<Tensor>>& grads) : grads_(grads) {}
    void accumulate(const std::optional<NodeId>& target, const Tensor& grad);
    /// True when the target is on the tape and thus wants a gradient.
    bool wants(const std::optional<NodeId>& target) const { return target.has_value(); }

private:
    std::vector<std::optional<Tensor>>& grads_;
};

using BackwardFn = std::function<void(const Tensor& grad_out, GradSink& sink)>;

/// Linear record of the operations applied while this tape is active. Nodes are
/// appended in execution order so the record is topologically sorted by
/// construction. Single-threaded; use one tape per thread.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Registers a parameter leaf and returns it linked to the new node.
    Tensor leaf(Tensor value);

    NodeId record(OpKind kind, std::vector<std::optional<NodeId>> inputs, const Shape& output_shape,
                  BackwardFn backward);

    /// Reverse sweep from `loss`. The returned map holds a gradient for every
    /// node reached, leaves included; d loss / d loss == 1.
    GradientMap backward(const Tensor& loss) const;

    std::size_t size() const noexcept { return nodes_.size(); }
    OpKind kind(NodeId id) const { return nodes_.at(id.value).kind; }
    const std::vector<std::optional<NodeId>>& inputs(NodeId id) const { return nodes_.at(id.value).inputs; }

private:
    struct Node {
        OpKind kind;
        std::vector<std::optional<NodeId>> inputs;
        Shape shape;
        BackwardFn backward;
    };
    std::vector<Node> nodes_;
};

/// Tape that ops on the current thread record into, or nullptr.
Tape* active_tape() noexcept;

/// Makes `tape` active on this thread for the scope's lifetime.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

/// Suspends recording for the scope's lifetime (used for detached values).
class NoGradScope {
public:
    NoGradScope();
    ~NoGradScope();
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    Tape* previous_;
};

const Tensor& grad_of(const GradientMap& grads, const Tensor& t);

} // namespace dcv
