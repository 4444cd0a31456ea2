#include "dcv/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "dcv/error.hpp"
#include "gemm.hpp"

namespace dcv::ops {

namespace {

bool recording(std::initializer_list<const Tensor*> inputs) {
    if (!active_tape()) return false;
    return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->tracked(); });
}

Tensor finish(OpKind kind, Tensor out, std::vector<std::optional<NodeId>> inputs, BackwardFn backward) {
    if (!out.all_finite()) {
        throw NumericError(std::string("op ") + op_name(kind) + " produced a non-finite value");
    }
    if (backward) {
        const NodeId id = active_tape()->record(kind, std::move(inputs), out.shape(), std::move(backward));
        out.set_node(id);
    }
    return out;
}

std::size_t normalize_axis(int axis, std::size_t rank, const char* op) {
    const int r = static_cast<int>(rank);
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
        throw ArgumentError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                            std::to_string(rank));
    }
    return static_cast<std::size_t>(a);
}

struct AxisSplit {
    std::size_t outer = 1;
    std::size_t n = 1;
    std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.n = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

std::size_t last_dim(const Tensor& t, const char* op) {
    if (t.rank() == 0) throw DimensionError(std::string(op) + " needs rank >= 1, got a scalar");
    return t.shape().back();
}

// ---------------------------------------------------------------- broadcasting

struct Broadcast {
    Shape out;
    std::vector<std::size_t> a_stride;
    std::vector<std::size_t> b_stride;
    enum class Mode { same, b_suffix, general } mode = Mode::general;
};

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
    Broadcast p;
    const std::size_t r = std::max(a.size(), b.size());
    p.out.assign(r, 1);
    p.a_stride.assign(r, 0);
    p.b_stride.assign(r, 0);
    std::size_t sa = 1;
    std::size_t sb = 1;
    for (std::size_t i = r; i-- > 0;) {
        const std::size_t off_a = r - a.size();
        const std::size_t off_b = r - b.size();
        const std::size_t ea = i >= off_a ? a[i - off_a] : 1;
        const std::size_t eb = i >= off_b ? b[i - off_b] : 1;
        if (ea != eb && ea != 1 && eb != 1) {
            throw DimensionError(std::string(op) + ": cannot broadcast " + shape_string(a) + " with " +
                                 shape_string(b));
        }
        p.out[i] = std::max(ea, eb);
        p.a_stride[i] = ea == 1 ? 0 : sa;
        p.b_stride[i] = eb == 1 ? 0 : sb;
        sa *= ea;
        sb *= eb;
    }
    if (a == b) {
        p.mode = Broadcast::Mode::same;
    } else if (p.out == a && b.size() <= a.size() &&
               std::equal(b.begin(), b.end(), a.end() - static_cast<std::ptrdiff_t>(b.size()))) {
        p.mode = Broadcast::Mode::b_suffix;
    }
    return p;
}

template <class F>
void for_each_broadcast(const Broadcast& p, std::size_t b_size, F&& f) {
    const std::size_t total = shape_size(p.out);
    if (p.mode == Broadcast::Mode::same) {
        for (std::size_t i = 0; i < total; ++i) f(i, i, i);
        return;
    }
    if (p.mode == Broadcast::Mode::b_suffix) {
        for (std::size_t i = 0, j = 0; i < total; ++i) {
            f(i, i, j);
            if (++j == b_size) j = 0;
        }
        return;
    }
    const std::size_t r = p.out.size();
    std::vector<std::size_t> idx(r, 0);
    std::size_t ia = 0;
    std::size_t ib = 0;
    for (std::size_t i = 0; i < total; ++i) {
        f(i, ia, ib);
        for (std::size_t d = r; d-- > 0;) {
            ++idx[d];
            ia += p.a_stride[d];
            ib += p.b_stride[d];
            if (idx[d] < p.out[d]) break;
            ia -= p.a_stride[d] * idx[d];
            ib -= p.b_stride[d] * idx[d];
            idx[d] = 0;
        }
    }
}

enum class Binary { add, sub, mul };

Tensor binary(Binary kind, const Tensor& a, const Tensor& b) {
    const OpKind op = kind == Binary::add ? OpKind::add : kind == Binary::sub ? OpKind::sub : OpKind::mul;
    const Broadcast plan = plan_broadcast(a.shape(), b.shape(), op_name(op));
    Tensor out(plan.out);
    auto o = out.mutable_data();
    auto x = a.data();
    auto y = b.data();
    switch (kind) {
        case Binary::add:
            for_each_broadcast(plan, b.size(), [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = x[ia] + y[ib]; });
            break;
        case Binary::sub:
            for_each_broadcast(plan, b.size(), [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = x[ia] - y[ib]; });
            break;
        case Binary::mul:
            for_each_broadcast(plan, b.size(), [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = x[ia] * y[ib]; });
            break;
    }
    if (!recording({&a, &b})) return finish(op, std::move(out), {}, nullptr);

    const bool want_a = a.tracked();
    const bool want_b = b.tracked();
    Tensor sa = kind == Binary::mul && want_b ? a.detach() : Tensor();
    Tensor sb = kind == Binary::mul && want_a ? b.detach() : Tensor();
    Shape shape_a = a.shape();
    Shape shape_b = b.shape();
    auto backward = [kind, plan, want_a, want_b, sa = std::move(sa), sb = std::move(sb), shape_a, shape_b,
                     na = a.node(), nb = b.node()](const Tensor& g, GradSink& sink) {
        auto gd = g.data();
        if (want_a) {
            Tensor ga(shape_a);
            auto d = ga.mutable_data();
            if (kind == Binary::mul) {
                auto yb = sb.data();
                for_each_broadcast(plan, yb.size(), [&](std::size_t i, std::size_t ia, std::size_t ib) { d[ia] += gd[i] * yb[ib]; });
            } else {
                for_each_broadcast(plan, shape_size(shape_b), [&](std::size_t i, std::size_t ia, std::size_t) { d[ia] += gd[i]; });
            }
            sink.accumulate(na, ga);
        }
        if (want_b) {
            Tensor gb(shape_b);
            auto d = gb.mutable_data();
            if (kind == Binary::mul) {
                auto xa = sa.data();
                for_each_broadcast(plan, shape_size(shape_b), [&](std::size_t i, std::size_t ia, std::size_t ib) { d[ib] += gd[i] * xa[ia]; });
            } else if (kind == Binary::add) {
                for_each_broadcast(plan, shape_size(shape_b), [&](std::size_t i, std::size_t, std::size_t ib) { d[ib] += gd[i]; });
            } else {
                for_each_broadcast(plan, shape_size(shape_b), [&](std::size_t i, std::size_t, std::size_t ib) { d[ib] -= gd[i]; });
            }
            sink.accumulate(nb, gb);
        }
    };
    return finish(op, std::move(out), {a.node(), b.node()}, std::move(backward));
}

// ---------------------------------------------------------------- matmul

struct MatmulPlan {
    std::size_t batch = 1;
    std::size_t m = 0, n = 0, k = 0;
    bool shared_b = false;  // b is one matrix applied to every batch entry
    Shape out;
};

MatmulPlan plan_matmul(const Tensor& a, const Tensor& b, bool ta, bool tb) {
    auto fail = [&] {
        return DimensionError("matmul: incompatible shapes " + shape_string(a.shape()) + (ta ? "^T" : "") + " x " +
                              shape_string(b.shape()) + (tb ? "^T" : ""));
    };
    if (a.rank() < 2 || b.rank() < 2) throw fail();
    MatmulPlan p;
    const std::size_t bk = tb ? b.shape()[b.rank() - 1] : b.shape()[b.rank() - 2];
    const std::size_t bn = tb ? b.shape()[b.rank() - 2] : b.shape()[b.rank() - 1];
    if (b.rank() == 2 && !(ta && a.rank() > 2)) {
        p.shared_b = true;
        if (ta) {
            p.k = a.shape()[0];
            p.m = a.shape()[1];
            p.out = {p.m, bn};
        } else {
            p.k = a.shape().back();
            p.m = a.size() / p.k;
            p.out = Shape(a.shape().begin(), a.shape().end() - 1);
            p.out.push_back(bn);
        }
        p.n = bn;
        if (p.k != bk) throw fail();
        return p;
    }
    if (a.rank() != b.rank()) throw fail();
    for (std::size_t i = 0; i + 2 < a.rank(); ++i) {
        if (a.shape()[i] != b.shape()[i]) throw fail();
        p.batch *= a.shape()[i];
    }
    const std::size_t ar = a.shape()[a.rank() - 2];
    const std::size_t ac = a.shape()[a.rank() - 1];
    p.m = ta ? ac : ar;
    p.k = ta ? ar : ac;
    p.n = bn;
    if (p.k != bk) throw fail();
    p.out = Shape(a.shape().begin(), a.shape().end() - 2);
    p.out.push_back(p.m);
    p.out.push_back(p.n);
    return p;
}

void run_matmul(const MatmulPlan& p, bool ta, bool tb, const double* a, const double* b, double* c, bool acc) {
    const std::size_t a_step = p.m * p.k;
    const std::size_t b_step = p.shared_b ? 0 : p.k * p.n;
    const std::size_t c_step = p.m * p.n;
    for (std::size_t i = 0; i < p.batch; ++i) {
        detail::gemm(ta, tb, p.m, p.n, p.k, a + i * a_step, b + i * b_step, c + i * c_step, acc);
    }
}

} // namespace

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
    const MatmulPlan p = plan_matmul(a, b, trans_a, trans_b);
    Tensor out(p.out);
    run_matmul(p, trans_a, trans_b, a.data().data(), b.data().data(), out.mutable_data().data(), false);
    if (!recording({&a, &b})) return finish(OpKind::matmul, std::move(out), {}, nullptr);

    auto backward = [p, ta = trans_a, tb = trans_b, sa = a.detach(), sb = b.detach(), na = a.node(),
                     nb = b.node()](const Tensor& g, GradSink& sink) {
        const double* gd = g.data().data();
        const double* ad = sa.data().data();
        const double* bd = sb.data().data();
        const std::size_t a_step = p.m * p.k;
        const std::size_t b_step = p.k * p.n;
        const std::size_t g_step = p.m * p.n;
        if (na) {
            Tensor ga(sa.shape());
            double* d = ga.mutable_data().data();
            for (std::size_t i = 0; i < p.batch; ++i) {
                const double* gi = gd + i * g_step;
                const double* bi = bd + (p.shared_b ? 0 : i * b_step);
                double* di = d + i * a_step;
                // Stored A is m x k (or k x m when transposed).
                if (!ta && !tb) detail::gemm(false, true, p.m, p.k, p.n, gi, bi, di, false);
                else if (!ta && tb) detail::gemm(false, false, p.m, p.k, p.n, gi, bi, di, false);
                else if (ta && !tb) detail::gemm(false, true, p.k, p.m, p.n, bi, gi, di, false);
                else detail::gemm(true, true, p.k, p.m, p.n, bi, gi, di, false);
            }
            sink.accumulate(na, ga);
        }
        if (nb) {
            Tensor gb(sb.shape());
            double* d = gb.mutable_data().data();
            for (std::size_t i = 0; i < p.batch; ++i) {
                const double* gi = gd + i * g_step;
                const double* ai = ad + i * a_step;
                double* di = d + (p.shared_b ? 0 : i * b_step);
                const bool acc = p.shared_b && i > 0;
                if (!ta && !tb) detail::gemm(true, false, p.k, p.n, p.m, ai, gi, di, acc);
                else if (!ta && tb) detail::gemm(true, false, p.n, p.k, p.m, gi, ai, di, acc);
                else if (ta && !tb) detail::gemm(false, false, p.k, p.n, p.m, ai, gi, di, acc);
                else detail::gemm(true, true, p.n, p.k, p.m, gi, ai, di, acc);
            }
            sink.accumulate(nb, gb);
        }
    };
    return finish(OpKind::matmul, std::move(out), {a.node(), b.node()}, std::move(backward));
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(Binary::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(Binary::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(Binary::mul, a, b); }

Tensor scale(const Tensor& a, double factor) {
    Tensor out(a.shape());
    auto o = out.mutable_data();
    auto x = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * factor;
    if (!recording({&a})) return finish(OpKind::scale, std::move(out), {}, nullptr);
    auto backward = [factor, na = a.node()](const Tensor& g, GradSink& sink) {
        Tensor ga(g.shape());
        auto d = ga.mutable_data();
        auto gd = g.data();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = gd[i] * factor;
        sink.accumulate(na, ga);
    };
    return finish(OpKind::scale, std::move(out), {a.node()}, std::move(backward));
}

Tensor relu(const Tensor& a) {
    Tensor out(a.shape());
    auto o = out.mutable_data();
    auto x = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] > 0.0 ? x[i] : 0.0;
    if (!recording({&a})) return finish(OpKind::relu, std::move(out), {}, nullptr);
    auto backward = [sx = a.detach(), na = a.node()](const Tensor& g, GradSink& sink) {
        Tensor ga(g.shape());
        auto d = ga.mutable_data();
        auto gd = g.data();
        auto xv = sx.data();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = xv[i] > 0.0 ? gd[i] : 0.0;
        sink.accumulate(na, ga);
    };
    return finish(OpKind::relu, std::move(out), {a.node()}, std::move(backward));
}

Tensor reciprocal(const Tensor& a) {
    Tensor out(a.shape());
    auto o = out.mutable_data();
    auto x = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) {
        if (x[i] == 0.0) throw NumericError("reciprocal of zero at index " + std::to_string(i));
        o[i] = 1.0 / x[i];
    }
    if (!recording({&a})) return finish(OpKind::reciprocal, std::move(out), {}, nullptr);
    auto backward = [so = out.detach(), na = a.node()](const Tensor& g, GradSink& sink) {
        Tensor ga(g.shape());
        auto d = ga.mutable_data();
        auto gd = g.data();
        auto y = so.data();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = -gd[i] * y[i] * y[i];
        sink.accumulate(na, ga);
    };
    return finish(OpKind::reciprocal, std::move(out), {a.node()}, std::move(backward));
}

Tensor gelu(const Tensor& a) {
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double k = 0.044715;
    Tensor out(a.shape());
    auto o = out.mutable_data();
    auto x = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) {
        const double v = x[i];
        o[i] = 0.5 * v * (1.0 + std::tanh(c * (v + k * v * v * v)));
    }
    if (!recording({&a})) return finish(OpKind::gelu, std::move(out), {}, nullptr);
    auto backward = [sx = a.detach(), na = a.node()](const Tensor& g, GradSink& sink) {
        Tensor ga(g.shape());
        auto d = ga.mutable_data();
        auto gd = g.data();
        auto xv = sx.data();
        for (std::size_t i = 0; i < d.size(); ++i) {
            const double v = xv[i];
            const double t = std::tanh(c * (v + k * v * v * v));
            const double dt = (1.0 - t * t) * c * (1.0 + 3.0 * k * v * v);
            d[i] = gd[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
        }
        sink.accumulate(na, ga);
    };
    return finish(OpKind::gelu, std::move(out), {a.node()}, std::move(backward));
}

Tensor softmax(const Tensor& a, int axis) {
    if (a.rank() == 0) throw DimensionError("softmax needs rank >= 1");
    const std::size_t ax = normalize_axis(axis, a.rank(), "softmax");
    const AxisSplit s = split_at(a.shape(), ax);
    Tensor out(a.shape());
    auto o = out.mutable_data();
    auto x = a.data();
    for (std::size_t outer = 0; outer < s.outer; ++outer) {
        for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = outer * s.n * s.inner + in;
            double mx = x[base];
            for (std::size_t j = 1; j < s.n; ++j) mx = std::max(mx, x[base + j * s.inner]);
            double total = 0.0;
            for (std::size_t j = 0; j < s.n; ++j) {
                const double e = std::exp(x[base + j * s.inner] - mx);
                o[base + j * s.inner] = e;
                total += e;
            }
            for (std::size_t j = 0; j < s.n; ++j) o[base + j * s.inner] /= total;
        }
    }
    if (!recording({&a})) return finish(OpKind::softmax, std::move(out), {}, nullptr);
    auto backward = [s, so = out.detach(), na = a.node()](const Tensor& g, GradSink& sink) {
        Tensor ga(g.shape());
        auto d = ga.mutable_data();
        auto gd = g.data();
        auto y = so.data();
        for (std::size_t outer = 0; outer < s.outer; ++outer) {
            for (std::size_t in = 0; in < s.inner; ++in) {
                const std::size_t base = outer * s.n * s.inner + in;
                double dot = 0.0;
                for (std::size_t j = 0; j < s.n; ++j) dot += gd[base + j * s.inner] * y[base + j * s.inner];
                for (std::size_t j = 0; j < s.n; ++j) {
                    const std::size_t idx = base + j * s.inner;
                    d[idx] = y[idx] * (gd[idx] - dot);
                }
            }
        }
        sink.accumulate(na, ga);
    };
    return finish(OpKind::softmax, std::move(out), {a.node()}, std::move(backward));
}

namespace {

Tensor reduce_axis(OpKind kind, const Tensor& a, int axis, bool keepdim) {
    const char* name = op_name(kind);
    if (a.rank() == 0) throw DimensionError(std::string(name) + " needs rank >= 1");
    const std::size_t ax = normalize_axis(axis, a.rank(), name);
    const AxisSplit s = split_at(a.shape(), ax);
    Shape out_shape = a.shape();
    if (keepdim) out_shape[ax] = 1;
    else out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
    const double factor = kind == OpKind::mean ? 1.0 / static_cast<double>(s.n) : 1.0;
    Tensor out(out_shape);
    auto o = out.mutable_data();
    auto x = a.data();
    for (std::size_t outer = 0; outer < s.outer; ++outer) {
        for (std::size_t in = 0; in < s.inner; ++in) {
            double total = 0.0;
            for (std::size_t j = 0; j < s.n; ++j) total += x[(outer * s.n + j) * s.inner + in];
            o[outer * s.inner + in] = total * factor;
        }
    }
    if (!recording({&a})) return finish(kind, std::move(out), {}, nullptr);
    auto backward = [s, factor, shape = a.shape(), na = a.node()](const Tensor& g, GradSink& sink) {
        Tensor ga(shape);
        auto d = ga.mutable_data();
        auto gd = g.data();
        for (std::size_t outer = 0; outer < s.outer; ++outer) {
            for (std::size_t j = 0; j < s.n; ++j) {
                for (std::size_t in = 0; in < s.inner; ++in) {
                    d[(outer * s.n + j) * s.inner + in] = gd[outer * s.inner + in] * factor;
                }
            }
        }
        sink.accumulate(na, ga);
    };
    return finish(kind, std::move(out), {a.node()}, std::move(backward));
}

} // namespace

Tensor mean(const Tensor& a, int axis, bool keepdim) { return reduce_axis(OpKind::mean, a, axis, keepdim); }
Tensor sum(const Tensor& a, int axis, bool keepdim) { return reduce_axis(OpKind::sum, a, axis, keepdim); }

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const std::size_t d = last_dim(x, "layer_norm");
    if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
        throw DimensionError("layer_norm: gain/bias " + shape_string(gain.shape()) + "/" +
                             shape_string(bias.shape()) + " do not match input " + shape_string(x.shape()));
    }
    if (!(eps > 0.0)) throw ArgumentError("layer_norm: eps must be positive");
    const std::size_t rows = x.size() / d;
    Tensor out(x.shape());
    Tensor xhat(x.shape());
    std::vector<double> rstd(rows);
    auto o = out.mutable_data();
    auto xh = xhat.mutable_data();
    auto xv = x.data();
    auto gv = gain.data();
    auto bv = bias.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xv.data() + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(d);
        rstd[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            xh[r * d + j] = (row[j] - mu) * rstd[r];
            o[r * d + j] = gv[j] * xh[r * d + j] + bv[j];
        }
    }
    if (!recording({&x, &gain, &bias})) return finish(OpKind::layer_norm, std::move(out), {}, nullptr);
    auto backward = [d, rows, xhat = std::move(xhat), rstd = std::move(rstd), sg = gain.detach(), nx = x.node(),
                     ng = gain.node(), nb = bias.node()](const Tensor& g, GradSink& sink) {
        auto gd = g.data();
        auto xh = xhat.data();
        auto gv = sg.data();
        if (nx) {
            Tensor gx(xhat.shape());
            auto dx = gx.mutable_data();
            for (std::size_t r = 0; r < rows; ++r) {
                double mean_dxh = 0.0;
                double mean_dxh_xh = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double dxh = gd[r * d + j] * gv[j];
                    mean_dxh += dxh;
                    mean_dxh_xh += dxh * xh[r * d + j];
                }
                mean_dxh /= static_cast<double>(d);
                mean_dxh_xh /= static_cast<double>(d);
                for (std::size_t j = 0; j < d; ++j) {
                    const double dxh = gd[r * d + j] * gv[j];
                    dx[r * d + j] = rstd[r] * (dxh - mean_dxh - xh[r * d + j] * mean_dxh_xh);
                }
            }
            sink.accumulate(nx, gx);
        }
        if (ng || nb) {
            Tensor gg(Shape{d});
            Tensor gb(Shape{d});
            auto dg = gg.mutable_data();
            auto db = gb.mutable_data();
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < d; ++j) {
                    dg[j] += gd[r * d + j] * xh[r * d + j];
                    db[j] += gd[r * d + j];
                }
            }
            sink.accumulate(ng, gg);
            sink.accumulate(nb, gb);
        }
    };
    return finish(OpKind::layer_norm, std::move(out), {x.node(), gain.node(), bias.node()}, std::move(backward));
}

Tensor l2_normalize(const Tensor& a) {
    const std::size_t d = last_dim(a, "l2_normalize");
    const std::size_t rows = a.size() / d;
    Tensor out(a.shape());
    std::vector<double> norms(rows);
    auto o = out.mutable_data();
    auto x = a.data();
    for (std::size_t r = 0; r < rows; ++r) {
        double ss = 0.0;
        for (std::size_t j = 0; j < d; ++j) ss += x[r * d + j] * x[r * d + j];
        norms[r] = std::sqrt(ss);
        if (norms[r] == 0.0) throw NumericError("l2_normalize of a zero vector (row " + std::to_string(r) + ")");
        for (std::size_t j = 0; j < d; ++j) o[r * d + j] = x[r * d + j] / norms[r];
    }
    if (!recording({&a})) return finish(OpKind::l2_normalize, std::move(out), {}, nullptr);
    auto backward = [d, rows, so = out.detach(), norms = std::move(norms), na = a.node()](const Tensor& g,
                                                                                           GradSink& sink) {
        Tensor ga(g.shape());
        auto dx = ga.mutable_data();
        auto gd = g.data();
        auto y = so.data();
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) dot += y[r * d + j] * gd[r * d + j];
            for (std::size_t j = 0; j < d; ++j) dx[r * d + j] = (gd[r * d + j] - y[r * d + j] * dot) / norms[r];
        }
        sink.accumulate(na, ga);
    };
    return finish(OpKind::l2_normalize, std::move(out), {a.node()}, std::move(backward));
}

Tensor norm(const Tensor& a) {
    const std::size_t d = last_dim(a, "norm");
    const std::size_t rows = a.size() / d;
    Tensor out(Shape(a.shape().begin(), a.shape().end() - 1));
    auto o = out.mutable_data();
    auto x = a.data();
    for (std::size_t r = 0; r < rows; ++r) {
        double ss = 0.0;
        for (std::size_t j = 0; j < d; ++j) ss += x[r * d + j] * x[r * d + j];
        o[r] = std::sqrt(ss);
    }
    if (!recording({&a})) return finish(OpKind::norm, std::move(out), {}, nullptr);
    auto backward = [d, rows, sx = a.detach(), so = out.detach(), na = a.node()](const Tensor& g, GradSink& sink) {
        Tensor ga(sx.shape());
        auto dx = ga.mutable_data();
        auto gd = g.data();
        auto xv = sx.data();
        auto n = so.data();
        for (std::size_t r = 0; r < rows; ++r) {
            if (n[r] == 0.0) continue;
            for (std::size_t j = 0; j < d; ++j) dx[r * d + j] = gd[r] * xv[r * d + j] / n[r];
        }
        sink.accumulate(na, ga);
    };
    return finish(OpKind::norm, std::move(out), {a.node()}, std::move(backward));
}

Tensor inner(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("inner: shapes differ " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    }
    const std::size_t d = last_dim(a, "inner");
    const std::size_t rows = a.size() / d;
    Tensor out(Shape(a.shape().begin(), a.shape().end() - 1));
    auto o = out.mutable_data();
    auto x = a.data();
    auto y = b.data();
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += x[r * d + j] * y[r * d + j];
        o[r] = s;
    }
    if (!recording({&a, &b})) return finish(OpKind::inner, std::move(out), {}, nullptr);
    auto backward = [d, rows, sa = a.detach(), sb = b.detach(), na = a.node(), nb = b.node()](const Tensor& g,
                                                                                                GradSink& sink) {
        auto gd = g.data();
        auto build = [&](const Tensor& other) {
            Tensor t(other.shape());
            auto dst = t.mutable_data();
            auto src = other.data();
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < d; ++j) dst[r * d + j] = gd[r] * src[r * d + j];
            }
            return t;
        };
        if (na) sink.accumulate(na, build(sb));
        if (nb) sink.accumulate(nb, build(sa));
    };
    return finish(OpKind::inner, std::move(out), {a.node(), b.node()}, std::move(backward));
}

Tensor concat(std::span<const Tensor> parts, int axis) {
    if (parts.empty()) throw ArgumentError("concat of zero tensors");
    const Shape& first = parts.front().shape();
    if (first.empty()) throw DimensionError("concat needs rank >= 1");
    const std::size_t ax = normalize_axis(axis, first.size(), "concat");
    Shape out_shape = first;
    out_shape[ax] = 0;
    for (const auto& p : parts) {
        if (p.rank() != first.size()) throw DimensionError("concat: rank mismatch " + shape_string(p.shape()));
        for (std::size_t i = 0; i < first.size(); ++i) {
            if (i != ax && p.shape()[i] != first[i]) {
                throw DimensionError("concat: shapes " + shape_string(first) + " and " + shape_string(p.shape()) +
                                     " differ off the concat axis");
            }
        }
        out_shape[ax] += p.shape()[ax];
    }
    const AxisSplit whole = split_at(out_shape, ax);
    Tensor out(out_shape);
    auto o = out.mutable_data();
    std::vector<std::size_t> offsets;
    std::size_t offset = 0;
    bool any_tracked = false;
    std::vector<std::optional<NodeId>> nodes;
    for (const auto& p : parts) {
        const std::size_t len = p.shape()[ax];
        auto x = p.data();
        for (std::size_t outer = 0; outer < whole.outer; ++outer) {
            std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(outer * len * whole.inner), len * whole.inner,
                        o.begin() + static_cast<std::ptrdiff_t>((outer * whole.n + offset) * whole.inner));
        }
        offsets.push_back(offset);
        offset += len;
        any_tracked = any_tracked || p.tracked();
        nodes.push_back(p.node());
    }
    if (!active_tape() || !any_tracked) return finish(OpKind::concat, std::move(out), {}, nullptr);
    std::vector<Shape> shapes;
    for (const auto& p : parts) shapes.push_back(p.shape());
    auto backward = [whole, ax, offsets, shapes, nodes](const Tensor& g, GradSink& sink) {
        auto gd = g.data();
        for (std::size_t k = 0; k < shapes.size(); ++k) {
            if (!nodes[k]) continue;
            const std::size_t len = shapes[k][ax];
            Tensor gp(shapes[k]);
            auto d = gp.mutable_data();
            for (std::size_t outer = 0; outer < whole.outer; ++outer) {
                std::copy_n(gd.begin() + static_cast<std::ptrdiff_t>((outer * whole.n + offsets[k]) * whole.inner),
                            len * whole.inner, d.begin() + static_cast<std::ptrdiff_t>(outer * len * whole.inner));
            }
            sink.accumulate(nodes[k], gp);
        }
    };
    return finish(OpKind::concat, std::move(out), nodes, std::move(backward));
}

Tensor slice(const Tensor& a, int axis, std::size_t start, std::size_t length) {
    if (a.rank() == 0) throw DimensionError("slice needs rank >= 1");
    const std::size_t ax = normalize_axis(axis, a.rank(), "slice");
    const AxisSplit s = split_at(a.shape(), ax);
    if (length == 0 || start + length > s.n) {
        throw ArgumentError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                            ") out of range for extent " + std::to_string(s.n));
    }
    Shape out_shape = a.shape();
    out_shape[ax] = length;
    Tensor out(out_shape);
    auto o = out.mutable_data();
    auto x = a.data();
    for (std::size_t outer = 0; outer < s.outer; ++outer) {
        std::copy_n(x.begin() + static_cast<std::ptrdiff_t>((outer * s.n + start) * s.inner), length * s.inner,
                    o.begin() + static_cast<std::ptrdiff_t>(outer * length * s.inner));
    }
    if (!recording({&a})) return finish(OpKind::slice, std::move(out), {}, nullptr);
    auto backward = [s, start, length, shape = a.shape(), na = a.node()](const Tensor& g, GradSink& sink) {
        Tensor ga(shape);
        auto d = ga.mutable_data();
        auto gd = g.data();
        for (std::size_t outer = 0; outer < s.outer; ++outer) {
            std::copy_n(gd.begin() + static_cast<std::ptrdiff_t>(outer * length * s.inner), length * s.inner,
                        d.begin() + static_cast<std::ptrdiff_t>((outer * s.n + start) * s.inner));
        }
        sink.accumulate(na, ga);
    };
    return finish(OpKind::slice, std::move(out), {a.node()}, std::move(backward));
}

Tensor reshape(const Tensor& a, Shape shape) {
    Tensor out = a.detach().reshaped(std::move(shape));
    if (!recording({&a})) return finish(OpKind::reshape, std::move(out), {}, nullptr);
    auto backward = [shape = a.shape(), na = a.node()](const Tensor& g, GradSink& sink) {
        sink.accumulate(na, g.reshaped(shape));
    };
    return finish(OpKind::reshape, std::move(out), {a.node()}, std::move(backward));
}

namespace {

Tensor permute_values(const Tensor& a, std::span<const std::size_t> perm) {
    const std::size_t r = a.rank();
    Shape out_shape(r);
    for (std::size_t i = 0; i < r; ++i) out_shape[i] = a.shape()[perm[i]];
    std::vector<std::size_t> in_stride(r, 1);
    for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * a.shape()[i];
    std::vector<std::size_t> stride(r);
    for (std::size_t i = 0; i < r; ++i) stride[i] = in_stride[perm[i]];
    Tensor out(out_shape);
    auto o = out.mutable_data();
    auto x = a.data();
    std::vector<std::size_t> idx(r, 0);
    std::size_t src = 0;
    for (std::size_t i = 0; i < o.size(); ++i) {
        o[i] = x[src];
        for (std::size_t d = r; d-- > 0;) {
            ++idx[d];
            src += stride[d];
            if (idx[d] < out_shape[d]) break;
            src -= stride[d] * idx[d];
            idx[d] = 0;
        }
    }
    return out;
}

} // namespace

Tensor permute(const Tensor& a, std::span<const std::size_t> perm) {
    if (perm.size() != a.rank()) throw ArgumentError("permute: axis list length does not match rank");
    std::vector<bool> seen(perm.size(), false);
    for (auto p : perm) {
        if (p >= perm.size() || seen[p]) throw ArgumentError("permute: not a permutation of the axes");
        seen[p] = true;
    }
    Tensor out = permute_values(a, perm);
    if (!recording({&a})) return finish(OpKind::permute, std::move(out), {}, nullptr);
    std::vector<std::size_t> inverse(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) inverse[perm[i]] = i;
    auto backward = [inverse, na = a.node()](const Tensor& g, GradSink& sink) {
        sink.accumulate(na, permute_values(g, inverse));
    };
    return finish(OpKind::permute, std::move(out), {a.node()}, std::move(backward));
}

Tensor embedding(const Tensor& table, std::span<const std::size_t> ids) {
    if (table.rank() != 2) throw DimensionError("embedding table must be rank 2, got " + shape_string(table.shape()));
    if (ids.empty()) throw ArgumentError("embedding lookup with no ids");
    const std::size_t vocab = table.shape()[0];
    const std::size_t d = table.shape()[1];
    Tensor out(Shape{ids.size(), d});
    auto o = out.mutable_data();
    auto t = table.data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= vocab) {
            throw ArgumentError("embedding id " + std::to_string(ids[i]) + " >= table size " + std::to_string(vocab));
        }
        std::copy_n(t.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                    o.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    if (!recording({&table})) return finish(OpKind::embedding, std::move(out), {}, nullptr);
    auto backward = [ids = std::vector<std::size_t>(ids.begin(), ids.end()), shape = table.shape(), d,
                     nt = table.node()](const Tensor& g, GradSink& sink) {
        Tensor gt(shape);
        auto dst = gt.mutable_data();
        auto gd = g.data();
        for (std::size_t i = 0; i < ids.size(); ++i) {
            for (std::size_t j = 0; j < d; ++j) dst[ids[i] * d + j] += gd[i * d + j];
        }
        sink.accumulate(nt, gt);
    };
    return finish(OpKind::embedding, std::move(out), {table.node()}, std::move(backward));
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
    if (logits.rank() != 2) throw DimensionError("cross_entropy: logits must be [n, C], got " + shape_string(logits.shape()));
    const std::size_t n = logits.shape()[0];
    const std::size_t c = logits.shape()[1];
    if (targets.size() != n) throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(n) + " rows");
    Tensor probs(logits.shape());
    auto p = probs.mutable_data();
    auto x = logits.data();
    double loss = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        if (targets[r] >= c) throw ArgumentError("cross_entropy: target " + std::to_string(targets[r]) + " >= classes " + std::to_string(c));
        const double* row = x.data() + r * c;
        double mx = row[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double total = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            p[r * c + j] = std::exp(row[j] - mx);
            total += p[r * c + j];
        }
        for (std::size_t j = 0; j < c; ++j) p[r * c + j] /= total;
        loss += (mx + std::log(total)) - row[targets[r]];
    }
    Tensor out = Tensor::scalar(loss / static_cast<double>(n));
    if (!recording({&logits})) return finish(OpKind::cross_entropy, std::move(out), {}, nullptr);
    auto backward = [n, c, probs = std::move(probs), tg = std::vector<std::size_t>(targets.begin(), targets.end()),
                     nl = logits.node()](const Tensor& g, GradSink& sink) {
        const double scale = g.item() / static_cast<double>(n);
        Tensor gl(probs.shape());
        auto d = gl.mutable_data();
        auto pv = probs.data();
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t j = 0; j < c; ++j) {
                d[r * c + j] = (pv[r * c + j] - (j == tg[r] ? 1.0 : 0.0)) * scale;
            }
        }
        sink.accumulate(nl, gl);
    };
    return finish(OpKind::cross_entropy, std::move(out), {logits.node()}, std::move(backward));
}

Tensor ln_fold(const Tensor& parts, const Tensor& reference, const Tensor& gain, double eps) {
    const std::size_t d = last_dim(reference, "ln_fold");
    if (parts.rank() != reference.rank() + 1 || parts.shape().back() != d ||
        !std::equal(reference.shape().begin(), reference.shape().end() - 1, parts.shape().begin()) ||
        gain.shape() != Shape{d}) {
        throw DimensionError("ln_fold: parts " + shape_string(parts.shape()) + ", reference " +
                             shape_string(reference.shape()) + ", gain " + shape_string(gain.shape()));
    }
    const std::size_t groups = reference.size() / d;
    const std::size_t per_group = parts.shape()[parts.rank() - 2];
    std::vector<double> stdev(groups);
    std::vector<double> ref_mean(groups);
    auto rv = reference.data();
    for (std::size_t gi = 0; gi < groups; ++gi) {
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += rv[gi * d + j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (rv[gi * d + j] - mu) * (rv[gi * d + j] - mu);
        var /= static_cast<double>(d);
        ref_mean[gi] = mu;
        stdev[gi] = std::sqrt(var + eps);
    }
    Tensor centered(parts.shape());
    Tensor out(parts.shape());
    auto cv = centered.mutable_data();
    auto o = out.mutable_data();
    auto pv = parts.data();
    auto gv = gain.data();
    for (std::size_t gi = 0; gi < groups; ++gi) {
        for (std::size_t t = 0; t < per_group; ++t) {
            const std::size_t base = (gi * per_group + t) * d;
            double mu = 0.0;
            for (std::size_t j = 0; j < d; ++j) mu += pv[base + j];
            mu /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) {
                cv[base + j] = pv[base + j] - mu;
                o[base + j] = gv[j] * cv[base + j] / stdev[gi];
            }
        }
    }
    if (!recording({&parts, &reference, &gain})) return finish(OpKind::ln_fold, std::move(out), {}, nullptr);
    auto backward = [d, groups, per_group, centered = std::move(centered), stdev = std::move(stdev),
                     ref_mean = std::move(ref_mean), sref = reference.detach(), sg = gain.detach(),
                     np = parts.node(), nr = reference.node(), ng = gain.node()](const Tensor& g, GradSink& sink) {
        auto gd = g.data();
        auto cv = centered.data();
        auto gv = sg.data();
        auto rv = sref.data();
        if (np) {
            Tensor gp(centered.shape());
            auto dp = gp.mutable_data();
            for (std::size_t gi = 0; gi < groups; ++gi) {
                for (std::size_t t = 0; t < per_group; ++t) {
                    const std::size_t base = (gi * per_group + t) * d;
                    double mu = 0.0;
                    for (std::size_t j = 0; j < d; ++j) mu += gd[base + j] * gv[j];
                    mu /= static_cast<double>(d);
                    for (std::size_t j = 0; j < d; ++j) dp[base + j] = (gd[base + j] * gv[j] - mu) / stdev[gi];
                }
            }
            sink.accumulate(np, gp);
        }
        if (nr) {
            Tensor gr(sref.shape());
            auto dr = gr.mutable_data();
            for (std::size_t gi = 0; gi < groups; ++gi) {
                double ds = 0.0;
                for (std::size_t t = 0; t < per_group; ++t) {
                    const std::size_t base = (gi * per_group + t) * d;
                    for (std::size_t j = 0; j < d; ++j) ds += gd[base + j] * gv[j] * cv[base + j];
                }
                ds *= -1.0 / (stdev[gi] * stdev[gi]);
                for (std::size_t j = 0; j < d; ++j) {
                    dr[gi * d + j] = ds * (rv[gi * d + j] - ref_mean[gi]) / (static_cast<double>(d) * stdev[gi]);
                }
            }
            sink.accumulate(nr, gr);
        }
        if (ng) {
            Tensor gg(Shape{d});
            auto dg = gg.mutable_data();
            for (std::size_t gi = 0; gi < groups; ++gi) {
                for (std::size_t t = 0; t < per_group; ++t) {
                    const std::size_t base = (gi * per_group + t) * d;
                    for (std::size_t j = 0; j < d; ++j) dg[j] += gd[base + j] * cv[base + j] / stdev[gi];
                }
            }
            sink.accumulate(ng, gg);
        }
    };
    return finish(OpKind::ln_fold, std::move(out), {parts.node(), reference.node(), gain.node()},
                  std::move(backward));
}

} // namespace dcv::ops

namespace dcv {

Tensor apply(OpKind kind, std::span<const Tensor> inputs, const OpAttrs& attrs) {
    auto need = [&](std::size_t n) {
        if (inputs.size() != n) {
            throw ArgumentError(std::string(op_name(kind)) + " takes " + std::to_string(n) + " inputs, got " +
                                std::to_string(inputs.size()));
        }
    };
    switch (kind) {
        case OpKind::matmul: need(2); return ops::matmul(inputs[0], inputs[1], attrs.trans_a, attrs.trans_b);
        case OpKind::add: need(2); return ops::add(inputs[0], inputs[1]);
        case OpKind::sub: need(2); return ops::sub(inputs[0], inputs[1]);
        case OpKind::mul: need(2); return ops::mul(inputs[0], inputs[1]);
        case OpKind::scale: need(1); return ops::scale(inputs[0], attrs.factor);
        case OpKind::softmax: need(1); return ops::softmax(inputs[0], attrs.axis);
        case OpKind::layer_norm: need(3); return ops::layer_norm(inputs[0], inputs[1], inputs[2], attrs.eps);
        case OpKind::gelu: need(1); return ops::gelu(inputs[0]);
        case OpKind::mean: need(1); return ops::mean(inputs[0], attrs.axis, attrs.keepdim);
        case OpKind::sum: need(1); return ops::sum(inputs[0], attrs.axis, attrs.keepdim);
        case OpKind::l2_normalize: need(1); return ops::l2_normalize(inputs[0]);
        case OpKind::norm: need(1); return ops::norm(inputs[0]);
        case OpKind::inner: need(2); return ops::inner(inputs[0], inputs[1]);
        case OpKind::concat: return ops::concat(inputs, attrs.axis);
        case OpKind::slice: need(1); return ops::slice(inputs[0], attrs.axis, attrs.start, attrs.length);
        case OpKind::embedding: need(1); return ops::embedding(inputs[0], attrs.ids);
        case OpKind::cross_entropy: need(1); return ops::cross_entropy(inputs[0], attrs.ids);
        case OpKind::relu: need(1); return ops::relu(inputs[0]);
        case OpKind::reshape: need(1); return ops::reshape(inputs[0], attrs.shape);
        case OpKind::permute: need(1); return ops::permute(inputs[0], attrs.perm);
        case OpKind::reciprocal: need(1); return ops::reciprocal(inputs[0]);
        case OpKind::ln_fold: need(3); return ops::ln_fold(inputs[0], inputs[1], inputs[2], attrs.eps);
        case OpKind::leaf: break;
    }
    throw ArgumentError(std::string("apply: op kind ") + op_name(kind) + " is not applicable");
}

} // namespace dcv
