#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dcv {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Index of a recorded node on the active tape.
struct NodeId {
    std::size_t value = 0;
    auto operator<=>(const NodeId&) const = default;
};

/// Dense row-major tensor of doubles. A tensor produced while a tape is active
/// carries the id of the node that produced it; everything else is a constant.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double value);
    static Tensor vector(std::initializer_list<double> values);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t dim(int axis) const;

    std::span<const double> data() const noexcept { return data_; }
    std::span<double> mutable_data() noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    double operator[](std::size_t i) const { return data_[i]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double item() const;

    const std::optional<NodeId>& node() const noexcept { return node_; }
    bool tracked() const noexcept { return node_.has_value(); }
    void set_node(std::optional<NodeId> node) noexcept { node_ = node; }

    /// Same values, no tape linkage.
    Tensor detach() const;
    Tensor reshaped(Shape shape) const;

    bool all_finite() const noexcept;
    bool bitwise_equal(const Tensor& other) const noexcept;

private:
    Shape shape_;
    std::vector<double> data_;
    std::optional<NodeId> node_;
};

} // namespace dcv
