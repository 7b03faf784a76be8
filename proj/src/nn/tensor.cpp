#include "dirforge/nn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "dirforge/errors.hpp"

namespace dirforge::nn {

namespace {
thread_local bool g_grad_enabled = true;
}

std::string to_string(const Shape &s) {
    return "(" + std::to_string(s.n) + "," + std::to_string(s.c) + "," + std::to_string(s.x) + "," +
           std::to_string(s.y) + "," + std::to_string(s.z) + ")";
}

std::vector<float> &Node::grad_buffer() {
    if (grad.size() != value.size()) {
        grad.assign(value.size(), 0.0f);
    }
    return grad;
}

Tensor::Tensor(Shape shape, std::vector<float> values, bool requires_grad) : node_(std::make_shared<Node>()) {
    if (shape.n < 1 || shape.c < 1 || shape.x < 1 || shape.y < 1 || shape.z < 1) {
        throw std::invalid_argument("tensor shape must be positive, got " + to_string(shape));
    }
    if (values.size() != shape.numel()) {
        throw std::invalid_argument("tensor value count does not match shape " + to_string(shape));
    }
    node_->shape = shape;
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return Tensor(shape, std::vector<float>(shape.numel(), 0.0f), requires_grad);
}

Tensor Tensor::full(Shape shape, float v, bool requires_grad) {
    return Tensor(shape, std::vector<float>(shape.numel(), v), requires_grad);
}

Tensor Tensor::scalar(float v, bool requires_grad) { return Tensor(Shape{}, {v}, requires_grad); }

Tensor Tensor::from_volume(const Volume &vol, float scale, float offset) {
    const Dims &d = vol.dims();
    std::vector<float> v(vol.voxels().begin(), vol.voxels().end());
    if (scale != 1.0f || offset != 0.0f) {
        for (auto &x : v) {
            x = x * scale + offset;
        }
    }
    return Tensor(Shape{1, 1, d.nx, d.ny, d.nz}, std::move(v));
}

float Tensor::item() const {
    if (!shape().is_scalar()) {
        throw std::invalid_argument("item() on non-scalar tensor " + to_string(shape()));
    }
    return node_->value[0];
}

void Tensor::zero_grad() {
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
}

Tensor Tensor::detach() const {
    auto n = std::make_shared<Node>();
    n->shape = node_->shape;
    n->value = node_->value;
    return Tensor(std::move(n));
}

void Tensor::backward() const {
    if (!shape().is_scalar()) {
        throw std::invalid_argument("backward() requires a scalar loss, got shape " + to_string(shape()));
    }
    if (!node_->requires_grad) {
        return;
    }
    // Iterative post-order DFS gives a topological order.
    std::vector<Node *> order;
    std::unordered_set<Node *> visited;
    std::vector<std::pair<Node *, std::size_t>> stack{{node_.get(), 0}};
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto &[n, next] = stack.back();
        if (next < n->parents.size()) {
            Node *p = n->parents[next++].get();
            if (p->requires_grad && visited.insert(p).second) {
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    // Intermediate gradients restart from zero on every pass; leaves keep
    // accumulating.
    for (Node *n : order) {
        if (n->backward_fn && n != node_.get()) {
            std::fill(n->grad.begin(), n->grad.end(), 0.0f);
        }
    }
    auto &g = node_->grad_buffer();
    if (node_->backward_fn) {
        g[0] = 1.0f;
    } else {
        g[0] += 1.0f;
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) {
            (*it)->grad_buffer();
            (*it)->backward_fn();
        }
    }
}

Tensor make_result(const Shape &shape, std::initializer_list<const Tensor *> parents) {
    auto n = std::make_shared<Node>();
    n->shape = shape;
    n->value.assign(shape.numel(), 0.0f);
    if (g_grad_enabled) {
        for (const Tensor *p : parents) {
            if (p != nullptr && p->defined() && p->requires_grad()) {
                n->requires_grad = true;
            }
        }
        if (n->requires_grad) {
            for (const Tensor *p : parents) {
                if (p != nullptr && p->defined()) {
                    n->parents.push_back(p->node());
                }
            }
        }
    }
    return Tensor(std::move(n));
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void check_finite(const Tensor &t, const std::string &what) {
    for (float v : t.values()) {
        if (!std::isfinite(v)) {
            throw InvariantError(what + ": non-finite value");
        }
    }
    for (float v : t.grad()) {
        if (!std::isfinite(v)) {
            throw InvariantError(what + ": non-finite gradient");
        }
    }
}

} // namespace dirforge::nn
