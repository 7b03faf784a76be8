#include "dirforge/nn/ops.hpp"

#include <cmath>
#include <stdexcept>

namespace dirforge::nn {

namespace {

void require_same_shape(const Tensor &a, const Tensor &b, const char *op) {
    if (!(a.shape() == b.shape())) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                                    to_string(b.shape()));
    }
}

template <class Fwd, class Deriv>
Tensor unary(const Tensor &t, Fwd fwd, Deriv deriv) {
    Tensor out = make_result(t.shape(), {&t});
    const auto in = t.values();
    auto o = out.mutable_values();
    for (std::size_t i = 0; i < in.size(); ++i) {
        o[i] = fwd(in[i]);
    }
    if (out.requires_grad()) {
        Node *on = out.node().get();
        Node *tn = t.node().get();
        on->backward_fn = [on, tn, deriv] {
            if (!tn->requires_grad) {
                return;
            }
            auto &g = tn->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += on->grad[i] * deriv(tn->value[i], on->value[i]);
            }
        };
    }
    return out;
}

} // namespace

Tensor maxpool3d(const Tensor &input) {
    const Shape &s = input.shape();
    if (s.x % 2 != 0 || s.y % 2 != 0 || s.z % 2 != 0) {
        throw std::invalid_argument("maxpool3d: spatial dims " + to_string(s) + " not divisible by 2");
    }
    const Shape os{s.n, s.c, s.x / 2, s.y / 2, s.z / 2};
    Tensor out = make_result(os, {&input});
    const auto in = input.values();
    auto o = out.mutable_values();
    std::vector<std::uint32_t> argmax(os.numel());
    const std::size_t plane = static_cast<std::size_t>(s.x) * s.y;
    std::size_t oi = 0;
    for (int nc = 0; nc < s.n * s.c; ++nc) {
        const std::size_t base = static_cast<std::size_t>(nc) * s.spatial();
        for (int z = 0; z < os.z; ++z) {
            for (int y = 0; y < os.y; ++y) {
                for (int x = 0; x < os.x; ++x, ++oi) {
                    std::size_t best = base + (2 * z) * plane + static_cast<std::size_t>(2 * y) * s.x + 2 * x;
                    float bv = in[best];
                    for (int dz = 0; dz < 2; ++dz) {
                        for (int dy = 0; dy < 2; ++dy) {
                            for (int dx = 0; dx < 2; ++dx) {
                                const std::size_t i = base + (2 * z + dz) * plane +
                                                      static_cast<std::size_t>(2 * y + dy) * s.x + (2 * x + dx);
                                if (in[i] > bv) {
                                    bv = in[i];
                                    best = i;
                                }
                            }
                        }
                    }
                    o[oi] = bv;
                    argmax[oi] = static_cast<std::uint32_t>(best);
                }
            }
        }
    }
    if (out.requires_grad()) {
        Node *on = out.node().get();
        Node *tn = input.node().get();
        on->backward_fn = [on, tn, argmax = std::move(argmax)] {
            auto &g = tn->grad_buffer();
            for (std::size_t i = 0; i < argmax.size(); ++i) {
                g[argmax[i]] += on->grad[i];
            }
        };
    }
    return out;
}

Tensor leaky_relu(const Tensor &t, float slope) {
    return unary(
        t, [slope](float v) { return v > 0.0f ? v : slope * v; },
        [slope](float v, float) { return v > 0.0f ? 1.0f : slope; });
}

Tensor sigmoid(const Tensor &t) {
    return unary(
        t, [](float v) { return static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(v)))); },
        [](float, float y) { return y * (1.0f - y); });
}

Tensor tanh(const Tensor &t) {
    return unary(
        t, [](float v) { return std::tanh(v); }, [](float, float y) { return 1.0f - y * y; });
}

Tensor scale(const Tensor &t, float s) {
    return unary(
        t, [s](float v) { return v * s; }, [s](float, float) { return s; });
}

Tensor add(const Tensor &a, const Tensor &b) {
    require_same_shape(a, b, "add");
    Tensor out = make_result(a.shape(), {&a, &b});
    auto o = out.mutable_values();
    const auto av = a.values();
    const auto bv = b.values();
    for (std::size_t i = 0; i < o.size(); ++i) {
        o[i] = av[i] + bv[i];
    }
    if (out.requires_grad()) {
        Node *on = out.node().get();
        Node *an = a.node().get();
        Node *bn = b.node().get();
        on->backward_fn = [on, an, bn] {
            for (Node *p : {an, bn}) {
                if (p->requires_grad) {
                    auto &g = p->grad_buffer();
                    for (std::size_t i = 0; i < g.size(); ++i) {
                        g[i] += on->grad[i];
                    }
                }
            }
        };
    }
    return out;
}

Tensor mul(const Tensor &a, const Tensor &b) {
    require_same_shape(a, b, "mul");
    Tensor out = make_result(a.shape(), {&a, &b});
    auto o = out.mutable_values();
    const auto av = a.values();
    const auto bv = b.values();
    for (std::size_t i = 0; i < o.size(); ++i) {
        o[i] = av[i] * bv[i];
    }
    if (out.requires_grad()) {
        Node *on = out.node().get();
        Node *an = a.node().get();
        Node *bn = b.node().get();
        on->backward_fn = [on, an, bn] {
            if (an->requires_grad) {
                auto &g = an->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] += on->grad[i] * bn->value[i];
                }
            }
            if (bn->requires_grad) {
                auto &g = bn->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] += on->grad[i] * an->value[i];
                }
            }
        };
    }
    return out;
}

Tensor mul_channel_broadcast(const Tensor &x, const Tensor &gate) {
    const Shape &s = x.shape();
    const Shape &gs = gate.shape();
    if (gs.c != 1 || gs.n != s.n || gs.x != s.x || gs.y != s.y || gs.z != s.z) {
        throw std::invalid_argument("mul_channel_broadcast: gate " + to_string(gs) + " incompatible with " +
                                    to_string(s));
    }
    Tensor out = make_result(s, {&x, &gate});
    const std::size_t sp = s.spatial();
    const auto xv = x.values();
    const auto gv = gate.values();
    auto o = out.mutable_values();
    for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
            const std::size_t xb = (static_cast<std::size_t>(n) * s.c + c) * sp;
            const std::size_t gb = static_cast<std::size_t>(n) * sp;
            for (std::size_t i = 0; i < sp; ++i) {
                o[xb + i] = xv[xb + i] * gv[gb + i];
            }
        }
    }
    if (out.requires_grad()) {
        Node *on = out.node().get();
        Node *xn = x.node().get();
        Node *gn = gate.node().get();
        on->backward_fn = [on, xn, gn, s, sp] {
            for (int n = 0; n < s.n; ++n) {
                const std::size_t gb = static_cast<std::size_t>(n) * sp;
                std::vector<double> gacc(gn->requires_grad ? sp : 0, 0.0);
                for (int c = 0; c < s.c; ++c) {
                    const std::size_t xb = (static_cast<std::size_t>(n) * s.c + c) * sp;
                    if (xn->requires_grad) {
                        auto &g = xn->grad_buffer();
                        for (std::size_t i = 0; i < sp; ++i) {
                            g[xb + i] += on->grad[xb + i] * gn->value[gb + i];
                        }
                    }
                    if (gn->requires_grad) {
                        for (std::size_t i = 0; i < sp; ++i) {
                            gacc[i] += static_cast<double>(on->grad[xb + i]) * xn->value[xb + i];
                        }
                    }
                }
                if (gn->requires_grad) {
                    auto &g = gn->grad_buffer();
                    for (std::size_t i = 0; i < sp; ++i) {
                        g[gb + i] += static_cast<float>(gacc[i]);
                    }
                }
            }
        };
    }
    return out;
}

Tensor concat_channels(const Tensor &a, const Tensor &b) {
    const Shape &sa = a.shape();
    const Shape &sb = b.shape();
    if (sa.n != sb.n || sa.x != sb.x || sa.y != sb.y || sa.z != sb.z) {
        throw std::invalid_argument("concat_channels: spatial mismatch " + to_string(sa) + " vs " + to_string(sb));
    }
    const Shape os{sa.n, sa.c + sb.c, sa.x, sa.y, sa.z};
    Tensor out = make_result(os, {&a, &b});
    const std::size_t na = static_cast<std::size_t>(sa.c) * sa.spatial();
    const std::size_t nb = static_cast<std::size_t>(sb.c) * sb.spatial();
    auto o = out.mutable_values();
    for (int n = 0; n < sa.n; ++n) {
        std::copy_n(a.values().data() + n * na, na, o.data() + n * (na + nb));
        std::copy_n(b.values().data() + n * nb, nb, o.data() + n * (na + nb) + na);
    }
    if (out.requires_grad()) {
        Node *on = out.node().get();
        Node *an = a.node().get();
        Node *bn = b.node().get();
        on->backward_fn = [on, an, bn, na, nb, count = sa.n] {
            for (int n = 0; n < count; ++n) {
                if (an->requires_grad) {
                    auto &g = an->grad_buffer();
                    for (std::size_t i = 0; i < na; ++i) {
                        g[n * na + i] += on->grad[n * (na + nb) + i];
                    }
                }
                if (bn->requires_grad) {
                    auto &g = bn->grad_buffer();
                    for (std::size_t i = 0; i < nb; ++i) {
                        g[n * nb + i] += on->grad[n * (na + nb) + na + i];
                    }
                }
            }
        };
    }
    return out;
}

Tensor sum(const Tensor &t) {
    Tensor out = make_result(Shape{}, {&t});
    double s = 0.0;
    for (float v : t.values()) {
        s += v;
    }
    out.mutable_values()[0] = static_cast<float>(s);
    if (out.requires_grad()) {
        Node *on = out.node().get();
        Node *tn = t.node().get();
        on->backward_fn = [on, tn] {
            auto &g = tn->grad_buffer();
            for (auto &v : g) {
                v += on->grad[0];
            }
        };
    }
    return out;
}

Tensor mean(const Tensor &t) {
    Tensor out = make_result(Shape{}, {&t});
    double s = 0.0;
    for (float v : t.values()) {
        s += v;
    }
    const double n = static_cast<double>(t.values().size());
    out.mutable_values()[0] = static_cast<float>(s / n);
    if (out.requires_grad()) {
        Node *on = out.node().get();
        Node *tn = t.node().get();
        on->backward_fn = [on, tn, n] {
            auto &g = tn->grad_buffer();
            const float d = static_cast<float>(on->grad[0] / n);
            for (auto &v : g) {
                v += d;
            }
        };
    }
    return out;
}

Tensor bce(const Tensor &p, float label) {
    constexpr double kClamp = 1e-7;
    Tensor out = make_result(Shape{}, {&p});
    const auto pv = p.values();
    double s = 0.0;
    for (float v : pv) {
        if (!(v >= 0.0f && v <= 1.0f)) {
            throw std::invalid_argument("bce: probability outside [0, 1]");
        }
        const double q = std::clamp(static_cast<double>(v), kClamp, 1.0 - kClamp);
        s += -(label * std::log(q) + (1.0 - label) * std::log(1.0 - q));
    }
    const double n = static_cast<double>(pv.size());
    out.mutable_values()[0] = static_cast<float>(s / n);
    if (out.requires_grad()) {
        Node *on = out.node().get();
        Node *pn = p.node().get();
        on->backward_fn = [on, pn, label, n] {
            auto &g = pn->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double v = pn->value[i];
                if (v <= kClamp || v >= 1.0 - kClamp) {
                    continue;
                }
                const double d = (-label / v + (1.0 - label) / (1.0 - v)) / n;
                g[i] += static_cast<float>(on->grad[0] * d);
            }
        };
    }
    return out;
}

} // namespace dirforge::nn
