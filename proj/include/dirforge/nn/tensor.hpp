#pragma once

// Minimal reverse-mode autodiff tensor. Layout is (n, c, z, y, x) with x
// fastest, matching the volume payload order.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dirforge/volume.hpp"

namespace dirforge::nn {

struct Shape {
    int n = 1;
    int c = 1;
    int x = 1;
    int y = 1;
    int z = 1;

    [[nodiscard]] std::size_t spatial() const {
        return static_cast<std::size_t>(x) * static_cast<std::size_t>(y) * static_cast<std::size_t>(z);
    }
    [[nodiscard]] std::size_t numel() const {
        return static_cast<std::size_t>(n) * static_cast<std::size_t>(c) * spatial();
    }
    [[nodiscard]] Dims dims() const { return Dims{x, y, z}; }
    [[nodiscard]] bool is_scalar() const { return numel() == 1; }

    friend bool operator==(const Shape &, const Shape &) = default;
};

std::string to_string(const Shape &s);

struct Node {
    Shape shape;
    std::vector<float> value;
    std::vector<float> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void()> backward_fn;

    // Allocates a zeroed gradient buffer on first use.
    std::vector<float> &grad_buffer();
};

class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<float> values, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float v, bool requires_grad = false);
    static Tensor scalar(float v, bool requires_grad = false);
    static Tensor from_volume(const Volume &vol, float scale = 1.0f, float offset = 0.0f);

    [[nodiscard]] bool defined() const { return node_ != nullptr; }
    [[nodiscard]] const Shape &shape() const { return node_->shape; }
    [[nodiscard]] std::span<const float> values() const { return node_->value; }
    [[nodiscard]] std::span<float> mutable_values() { return node_->value; }
    // Empty until a backward pass reaches this tensor.
    [[nodiscard]] std::span<const float> grad() const { return node_->grad; }
    [[nodiscard]] bool requires_grad() const { return node_->requires_grad; }
    [[nodiscard]] float item() const;

    void zero_grad();
    // Seeds d(this)/d(this) = 1 and propagates to every reachable tensor
    // that requires grad. Gradients accumulate across calls.
    void backward() const;
    // Same values, no graph history.
    [[nodiscard]] Tensor detach() const;

    [[nodiscard]] const std::shared_ptr<Node> &node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
    friend Tensor make_result(const Shape &shape, std::initializer_list<const Tensor *> parents);

    std::shared_ptr<Node> node_;
};

// Creates an op output wired to `parents`; it requires grad when recording is
// enabled and any parent requires grad.
Tensor make_result(const Shape &shape, std::initializer_list<const Tensor *> parents);

bool grad_enabled();

// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard &) = delete;
    NoGradGuard &operator=(const NoGradGuard &) = delete;

private:
    bool previous_;
};

// Throws InvariantError if any value (or gradient, when present) is not finite.
void check_finite(const Tensor &t, const std::string &what);

} // namespace dirforge::nn
