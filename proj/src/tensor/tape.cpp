#include "dcv/tape.hpp"

#include "dcv/error.hpp"

namespace dcv {

namespace {
thread_local Tape* g_active = nullptr;
} // namespace

const char* op_name(OpKind kind) {
    switch (kind) {
        case OpKind::leaf: return "leaf";
        case OpKind::matmul: return "matmul";
        case OpKind::add: return "add";
        case OpKind::sub: return "sub";
        case OpKind::mul: return "mul";
        case OpKind::scale: return "scale";
        case OpKind::softmax: return "softmax";
        case OpKind::layer_norm: return "layer_norm";
        case OpKind::gelu: return "gelu";
        case OpKind::mean: return "mean";
        case OpKind::sum: return "sum";
        case OpKind::l2_normalize: return "l2_normalize";
        case OpKind::norm: return "norm";
        case OpKind::inner: return "inner";
        case OpKind::concat: return "concat";
        case OpKind::slice: return "slice";
        case OpKind::embedding: return "embedding";
        case OpKind::cross_entropy: return "cross_entropy";
        case OpKind::relu: return "relu";
        case OpKind::reshape: return "reshape";
        case OpKind::permute: return "permute";
        case OpKind::reciprocal: return "reciprocal";
        case OpKind::ln_fold: return "ln_fold";
    }
    return "unknown";
}

void GradSink::accumulate(const std::optional<NodeId>& target, const Tensor& grad) {
    if (!target) return;
    auto& slot = grads_.at(target->value);
    if (!slot) {
        slot = grad.detach();
        return;
    }
    if (slot->size() != grad.size()) {
        throw DimensionError("gradient shape " + shape_string(grad.shape()) + " does not match node shape " +
                             shape_string(slot->shape()));
    }
    auto dst = slot->mutable_data();
    auto src = grad.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

Tensor Tape::leaf(Tensor value) {
    const NodeId id = record(OpKind::leaf, {}, value.shape(), nullptr);
    value.set_node(id);
    return value;
}

NodeId Tape::record(OpKind kind, std::vector<std::optional<NodeId>> inputs, const Shape& output_shape,
                    BackwardFn backward) {
    for (const auto& in : inputs) {
        if (in && in->value >= nodes_.size()) throw StateError("input node is not on this tape");
    }
    nodes_.push_back(Node{kind, std::move(inputs), output_shape, std::move(backward)});
    return NodeId{nodes_.size() - 1};
}

GradientMap Tape::backward(const Tensor& loss) const {
    if (loss.size() != 1 || loss.rank() > 1) {
        throw ArgumentError("backward needs a scalar loss, got shape " + shape_string(loss.shape()));
    }
    if (!loss.node() || loss.node()->value >= nodes_.size()) {
        throw StateError("loss is not recorded on this tape");
    }
    std::vector<std::optional<Tensor>> grads(nodes_.size());
    const std::size_t root = loss.node()->value;
    grads[root] = Tensor(nodes_[root].shape, 1.0);
    GradSink sink(grads);
    for (std::size_t i = root + 1; i-- > 0;) {
        if (!grads[i] || !nodes_[i].backward) continue;
        nodes_[i].backward(*grads[i], sink);
    }
    GradientMap out;
    for (std::size_t i = 0; i <= root; ++i) {
        if (grads[i]) out.emplace(NodeId{i}, std::move(*grads[i]));
    }
    return out;
}

Tape* active_tape() noexcept { return g_active; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active) { g_active = &tape; }
TapeScope::~TapeScope() { g_active = previous_; }

NoGradScope::NoGradScope() : previous_(g_active) { g_active = nullptr; }
NoGradScope::~NoGradScope() { g_active = previous_; }

const Tensor& grad_of(const GradientMap& grads, const Tensor& t) {
    if (!t.node()) throw StateError("tensor is not on the tape");
    auto it = grads.find(*t.node());
    if (it == grads.end()) throw StateError("no gradient reached node " + std::to_string(t.node()->value));
    return it->second;
}

} // namespace dcv
