#include "focalcomm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace focalcomm {

namespace {

int normalize_axis(int axis, int rank, const char* op) {
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) {
        throw std::invalid_argument(std::string(op) + ": axis out of range");
    }
    return axis;
}

// Trailing-axis broadcasting plan. Strides are in elements; 0 marks a
// broadcast axis.
struct BroadcastPlan {
    std::vector<int> out_shape;
    std::vector<std::int64_t> a_strides;
    std::vector<std::int64_t> b_strides;
    bool same_shape = false;
};

std::vector<std::int64_t> row_major_strides(const std::vector<int>& shape) {
    std::vector<std::int64_t> s(shape.size());
    std::int64_t acc = 1;
    for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = acc;
        acc *= shape[static_cast<std::size_t>(i)];
    }
    return s;
}

BroadcastPlan make_broadcast(const std::vector<int>& a, const std::vector<int>& b, const char* op) {
    BroadcastPlan plan;
    if (a == b) {
        plan.out_shape = a;
        plan.same_shape = true;
        return plan;
    }
    const int ra = static_cast<int>(a.size());
    const int rb = static_cast<int>(b.size());
    const int r = std::max(ra, rb);
    plan.out_shape.resize(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) {
        const int ea = i < r - ra ? 1 : a[static_cast<std::size_t>(i - (r - ra))];
        const int eb = i < r - rb ? 1 : b[static_cast<std::size_t>(i - (r - rb))];
        if (ea != eb && ea != 1 && eb != 1) {
            throw std::invalid_argument(std::string(op) + ": shapes " + shape_to_string(a) + " and " +
                                        shape_to_string(b) + " are not broadcast-compatible");
        }
        plan.out_shape[static_cast<std::size_t>(i)] = std::max(ea, eb);
    }
    const auto sa = row_major_strides(a);
    const auto sb = row_major_strides(b);
    plan.a_strides.assign(static_cast<std::size_t>(r), 0);
    plan.b_strides.assign(static_cast<std::size_t>(r), 0);
    for (int i = 0; i < r; ++i) {
        if (i >= r - ra) {
            const int ea = a[static_cast<std::size_t>(i - (r - ra))];
            if (ea != 1) plan.a_strides[static_cast<std::size_t>(i)] = sa[static_cast<std::size_t>(i - (r - ra))];
        }
        if (i >= r - rb) {
            const int eb = b[static_cast<std::size_t>(i - (r - rb))];
            if (eb != 1) plan.b_strides[static_cast<std::size_t>(i)] = sb[static_cast<std::size_t>(i - (r - rb))];
        }
    }
    return plan;
}

// Visits the broadcast output space in row-major order, supplying the flat
// output index and the mapped input offsets.
template <class F>
void for_each_broadcast(const BroadcastPlan& plan, F&& f) {
    const int r = static_cast<int>(plan.out_shape.size());
    const std::int64_t n = shape_numel(plan.out_shape);
    std::vector<int> coord(static_cast<std::size_t>(r), 0);
    std::int64_t ai = 0;
    std::int64_t bi = 0;
    for (std::int64_t o = 0; o < n; ++o) {
        f(o, ai, bi);
        for (int ax = r - 1; ax >= 0; --ax) {
            const auto axu = static_cast<std::size_t>(ax);
            ++coord[axu];
            ai += plan.a_strides[axu];
            bi += plan.b_strides[axu];
            if (coord[axu] < plan.out_shape[axu]) break;
            ai -= plan.a_strides[axu] * plan.out_shape[axu];
            bi -= plan.b_strides[axu] * plan.out_shape[axu];
            coord[axu] = 0;
        }
    }
}

struct TrackContext {
    Tape* tape = nullptr;
    int out = -1;
    explicit operator bool() const { return tape != nullptr; }
};

TrackContext maybe_track(std::initializer_list<const Tensor*> inputs, Tensor& out) {
    Tape* tape = Tape::active();
    if (!tape) return {};
    bool any = false;
    for (const Tensor* in : inputs) {
        if (tape->node_of(*in) >= 0) {
            any = true;
            break;
        }
    }
    if (!any) return {};
    TrackContext ctx;
    ctx.tape = tape;
    ctx.out = tape->make_node(out);
    return ctx;
}

enum class BinKind { Add, Sub, Mul };

Tensor binary_op(const Tensor& a, const Tensor& b, BinKind kind, const char* name) {
    BroadcastPlan plan = make_broadcast(a.shape(), b.shape(), name);
    Tensor out(plan.out_shape);
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    if (plan.same_shape) {
        const std::int64_t n = out.size();
        switch (kind) {
            case BinKind::Add:
                for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
                break;
            case BinKind::Sub:
                for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
                break;
            case BinKind::Mul:
                for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
                break;
        }
    } else {
        switch (kind) {
            case BinKind::Add:
                for_each_broadcast(plan, [&](std::int64_t o, std::int64_t ai, std::int64_t bi) { po[o] = pa[ai] + pb[bi]; });
                break;
            case BinKind::Sub:
                for_each_broadcast(plan, [&](std::int64_t o, std::int64_t ai, std::int64_t bi) { po[o] = pa[ai] - pb[bi]; });
                break;
            case BinKind::Mul:
                for_each_broadcast(plan, [&](std::int64_t o, std::int64_t ai, std::int64_t bi) { po[o] = pa[ai] * pb[bi]; });
                break;
        }
    }
    if (auto ctx = maybe_track({&a, &b}, out)) {
        const int na = ctx.tape->node_of(a);
        const int nb = ctx.tape->node_of(b);
        std::vector<double> av;
        std::vector<double> bv;
        if (kind == BinKind::Mul) {
            if (nb >= 0) av = a.values();
            if (na >= 0) bv = b.values();
        }
        ctx.tape->record([plan, kind, na, nb, no = ctx.out, av = std::move(av), bv = std::move(bv)](Tape& t) {
            const std::vector<double>& go = t.grad(no);
            std::vector<double>* ga = na >= 0 ? &t.grad(na) : nullptr;
            std::vector<double>* gb = nb >= 0 ? &t.grad(nb) : nullptr;
            if (plan.same_shape) {
                const std::int64_t n = static_cast<std::int64_t>(go.size());
                for (std::int64_t i = 0; i < n; ++i) {
                    const double g = go[static_cast<std::size_t>(i)];
                    switch (kind) {
                        case BinKind::Add:
                            if (ga) (*ga)[static_cast<std::size_t>(i)] += g;
                            if (gb) (*gb)[static_cast<std::size_t>(i)] += g;
                            break;
                        case BinKind::Sub:
                            if (ga) (*ga)[static_cast<std::size_t>(i)] += g;
                            if (gb) (*gb)[static_cast<std::size_t>(i)] -= g;
                            break;
                        case BinKind::Mul:
                            if (ga) (*ga)[static_cast<std::size_t>(i)] += bv[static_cast<std::size_t>(i)] * g;
                            if (gb) (*gb)[static_cast<std::size_t>(i)] += av[static_cast<std::size_t>(i)] * g;
                            break;
                    }
                }
            } else {
                for_each_broadcast(plan, [&](std::int64_t o, std::int64_t ai, std::int64_t bi) {
                    const double g = go[static_cast<std::size_t>(o)];
                    switch (kind) {
                        case BinKind::Add:
                            if (ga) (*ga)[static_cast<std::size_t>(ai)] += g;
                            if (gb) (*gb)[static_cast<std::size_t>(bi)] += g;
                            break;
                        case BinKind::Sub:
                            if (ga) (*ga)[static_cast<std::size_t>(ai)] += g;
                            if (gb) (*gb)[static_cast<std::size_t>(bi)] -= g;
                            break;
                        case BinKind::Mul:
                            if (ga) (*ga)[static_cast<std::size_t>(ai)] += bv[static_cast<std::size_t>(bi)] * g;
                            if (gb) (*gb)[static_cast<std::size_t>(bi)] += av[static_cast<std::size_t>(ai)] * g;
                            break;
                    }
                });
            }
        });
    }
    return out;
}

// Unary elementwise op. `dfn` maps (x, y) to dy/dx.
template <class Fwd, class Dfn>
Tensor unary_op(const Tensor& x, Fwd&& fwd, Dfn&& dfn) {
    Tensor out(x.shape());
    const std::int64_t n = x.size();
    for (std::int64_t i = 0; i < n; ++i) out[i] = fwd(x[i]);
    if (auto ctx = maybe_track({&x}, out)) {
        const int nx = ctx.tape->node_of(x);
        std::vector<double> xv = x.values();
        std::vector<double> yv = out.values();
        ctx.tape->record([nx, no = ctx.out, xv = std::move(xv), yv = std::move(yv), dfn](Tape& t) {
            const std::vector<double>& go = t.grad(no);
            std::vector<double>& gx = t.grad(nx);
            for (std::size_t i = 0; i < go.size(); ++i) {
                gx[i] += dfn(xv[i], yv[i]) * go[i];
            }
        });
    }
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Mul, "mul"); }

Tensor scale(const Tensor& x, double c) {
    return unary_op(
        x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& x, double c) {
    return unary_op(
        x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& x) {
    return unary_op(
        x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
    return unary_op(
        x,
        [](double v) {
            if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
            const double e = std::exp(v);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& x) {
    return unary_op(
        x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
    return unary_op(
        x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
    if (lo > hi) {
        throw std::invalid_argument("clamp: lo > hi");
    }
    return unary_op(
        x, [lo, hi](double v) { return std::min(std::max(v, lo), hi); },
        [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) {
        throw std::invalid_argument("matmul: incompatible shapes " + a.shape_str() + " x " + b.shape_str());
    }
    return bmm(a, b);
}

Tensor bmm(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || b.rank() < 2) {
        throw std::invalid_argument("bmm: operands must have rank >= 2, got " + a.shape_str() + " and " +
                                    b.shape_str());
    }
    const int m = a.extent(a.rank() - 2);
    const int k = a.extent(a.rank() - 1);
    const int n = b.extent(b.rank() - 1);
    const bool b_broadcast = b.rank() == 2;
    if (b.extent(b.rank() - 2) != k) {
        throw std::invalid_argument("bmm: inner extents differ: " + a.shape_str() + " x " + b.shape_str());
    }
    std::vector<int> batch_shape(a.shape().begin(), a.shape().end() - 2);
    if (!b_broadcast) {
        std::vector<int> b_batch(b.shape().begin(), b.shape().end() - 2);
        if (b_batch != batch_shape) {
            throw std::invalid_argument("bmm: batch extents differ: " + a.shape_str() + " x " + b.shape_str());
        }
    }
    const std::int64_t batches = shape_numel(batch_shape.empty() ? std::vector<int>{1} : batch_shape);
    std::vector<int> out_shape = batch_shape;
    out_shape.push_back(m);
    out_shape.push_back(n);
    Tensor out(out_shape);

    const auto run = [m, k, n](const double* pa, const double* pb, double* po) {
        for (int i = 0; i < m; ++i) {
            double* orow = po + static_cast<std::int64_t>(i) * n;
            for (int j = 0; j < n; ++j) orow[j] = 0.0;
            const double* arow = pa + static_cast<std::int64_t>(i) * k;
            for (int kk = 0; kk < k; ++kk) {
                const double av = arow[kk];
                if (av == 0.0) continue;
                const double* brow = pb + static_cast<std::int64_t>(kk) * n;
                for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
            }
        }
    };

    const std::int64_t a_block = static_cast<std::int64_t>(m) * k;
    const std::int64_t b_block = static_cast<std::int64_t>(k) * n;
    const std::int64_t o_block = static_cast<std::int64_t>(m) * n;
    for (std::int64_t bi = 0; bi < batches; ++bi) {
        run(a.data() + bi * a_block, b.data() + (b_broadcast ? 0 : bi * b_block), out.data() + bi * o_block);
    }

    if (auto ctx = maybe_track({&a, &b}, out)) {
        const int na = ctx.tape->node_of(a);
        const int nb = ctx.tape->node_of(b);
        std::vector<double> av;
        std::vector<double> bv;
        if (nb >= 0) av = a.values();
        if (na >= 0) bv = b.values();
        ctx.tape->record([na, nb, no = ctx.out, av = std::move(av), bv = std::move(bv), m, k, n, batches, a_block,
                          b_block, o_block, b_broadcast](Tape& t) {
            const std::vector<double>& go = t.grad(no);
            if (na >= 0) {
                std::vector<double>& ga = t.grad(na);
                for (std::int64_t bi = 0; bi < batches; ++bi) {
                    const double* g = go.data() + bi * o_block;
                    const double* pb = bv.data() + (b_broadcast ? 0 : bi * b_block);
                    double* pa = ga.data() + bi * a_block;
                    // dA = dOut * B^T
                    for (int i = 0; i < m; ++i) {
                        for (int kk = 0; kk < k; ++kk) {
                            double acc = 0.0;
                            const double* grow = g + static_cast<std::int64_t>(i) * n;
                            const double* brow = pb + static_cast<std::int64_t>(kk) * n;
                            for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                            pa[static_cast<std::int64_t>(i) * k + kk] += acc;
                        }
                    }
                }
            }
            if (nb >= 0) {
                std::vector<double>& gb = t.grad(nb);
                for (std::int64_t bi = 0; bi < batches; ++bi) {
                    const double* g = go.data() + bi * o_block;
                    const double* pa = av.data() + bi * a_block;
                    double* pgb = gb.data() + (b_broadcast ? 0 : bi * b_block);
                    // dB (+)= A^T * dOut
                    for (int kk = 0; kk < k; ++kk) {
                        for (int i = 0; i < m; ++i) {
                            const double aval = pa[static_cast<std::int64_t>(i) * k + kk];
                            if (aval == 0.0) continue;
                            const double* grow = g + static_cast<std::int64_t>(i) * n;
                            double* brow = pgb + static_cast<std::int64_t>(kk) * n;
                            for (int j = 0; j < n; ++j) brow[j] += aval * grow[j];
                        }
                    }
                }
            }
        });
    }
    return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
    if (w.rank() != 2) {
        throw std::invalid_argument("linear: weight must be rank 2, got " + w.shape_str());
    }
    if (bias.rank() != 1 || bias.extent(0) != w.extent(1)) {
        throw std::invalid_argument("linear: bias shape " + bias.shape_str() + " does not match weight " +
                                    w.shape_str());
    }
    if (x.rank() == 1) {
        Tensor row = reshape(x, {1, x.extent(0)});
        return reshape(add(bmm(row, w), bias), {w.extent(1)});
    }
    return add(bmm(x, w), bias);
}

Tensor reshape(const Tensor& x, std::vector<int> shape) {
    if (shape_numel(shape) != x.size()) {
        throw std::invalid_argument("reshape: cannot view " + x.shape_str() + " as " + shape_to_string(shape));
    }
    Tensor out(std::move(shape), x.values());
    if (auto ctx = maybe_track({&x}, out)) {
        const int nx = ctx.tape->node_of(x);
        ctx.tape->record([nx, no = ctx.out](Tape& t) {
            const std::vector<double>& go = t.grad(no);
            std::vector<double>& gx = t.grad(nx);
            for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
        });
    }
    return out;
}

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
    const int r = x.rank();
    if (static_cast<int>(perm.size()) != r) {
        throw std::invalid_argument("permute: perm rank mismatch for " + x.shape_str());
    }
    std::vector<bool> seen(static_cast<std::size_t>(r), false);
    for (int p : perm) {
        if (p < 0 || p >= r || seen[static_cast<std::size_t>(p)]) {
            throw std::invalid_argument("permute: invalid permutation");
        }
        seen[static_cast<std::size_t>(p)] = true;
    }
    std::vector<int> out_shape(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) out_shape[static_cast<std::size_t>(i)] = x.extent(perm[static_cast<std::size_t>(i)]);
    const auto in_strides = row_major_strides(x.shape());
    std::vector<std::int64_t> strides(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) strides[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];

    Tensor out(out_shape);
    const std::int64_t n = out.size();
    std::vector<int> coord(static_cast<std::size_t>(r), 0);
    std::int64_t src = 0;
    for (std::int64_t o = 0; o < n; ++o) {
        out[o] = x[src];
        for (int ax = r - 1; ax >= 0; --ax) {
            const auto axu = static_cast<std::size_t>(ax);
            ++coord[axu];
            src += strides[axu];
            if (coord[axu] < out_shape[axu]) break;
            src -= strides[axu] * out_shape[axu];
            coord[axu] = 0;
        }
    }
    if (auto ctx = maybe_track({&x}, out)) {
        const int nx = ctx.tape->node_of(x);
        ctx.tape->record([nx, no = ctx.out, out_shape, strides, r](Tape& t) {
            const std::vector<double>& go = t.grad(no);
            std::vector<double>& gx = t.grad(nx);
            std::vector<int> c(static_cast<std::size_t>(r), 0);
            std::int64_t src = 0;
            for (std::size_t o = 0; o < go.size(); ++o) {
                gx[static_cast<std::size_t>(src)] += go[o];
                for (int ax = r - 1; ax >= 0; --ax) {
                    const auto axu = static_cast<std::size_t>(ax);
                    ++c[axu];
                    src += strides[axu];
                    if (c[axu] < out_shape[axu]) break;
                    src -= strides[axu] * out_shape[axu];
                    c[axu] = 0;
                }
            }
        });
    }
    return out;
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
    if (xs.empty()) {
        throw std::invalid_argument("concat: no inputs");
    }
    const int r = xs[0].rank();
    axis = normalize_axis(axis, r, "concat");
    std::vector<int> out_shape = xs[0].shape();
    for (std::size_t i = 1; i < xs.size(); ++i) {
        if (xs[i].rank() != r) {
            throw std::invalid_argument("concat: rank mismatch");
        }
        for (int d = 0; d < r; ++d) {
            if (d == axis) continue;
            if (xs[i].extent(d) != out_shape[static_cast<std::size_t>(d)]) {
                throw std::invalid_argument("concat: shape mismatch " + xs[i].shape_str() + " vs " +
                                            shape_to_string(out_shape));
            }
        }
        out_shape[static_cast<std::size_t>(axis)] += xs[i].extent(axis);
    }
    Tensor out(out_shape);

    std::int64_t outer = 1;
    for (int d = 0; d < axis; ++d) outer *= out_shape[static_cast<std::size_t>(d)];
    std::int64_t inner = 1;
    for (int d = axis + 1; d < r; ++d) inner *= out_shape[static_cast<std::size_t>(d)];
    const std::int64_t out_axis = out_shape[static_cast<std::size_t>(axis)];

    std::int64_t axis_offset = 0;
    std::vector<std::int64_t> offsets;
    for (const Tensor& x : xs) {
        offsets.push_back(axis_offset);
        const std::int64_t xa = x.extent(axis);
        for (std::int64_t ou = 0; ou < outer; ++ou) {
            const double* src = x.data() + ou * xa * inner;
            double* dst = out.data() + (ou * out_axis + axis_offset) * inner;
            std::copy(src, src + xa * inner, dst);
        }
        axis_offset += xa;
    }

    std::vector<const Tensor*> ptrs;
    for (const Tensor& x : xs) ptrs.push_back(&x);
    Tape* tape = Tape::active();
    bool any = false;
    if (tape) {
        for (const Tensor* p : ptrs) {
            if (tape->node_of(*p) >= 0) {
                any = true;
                break;
            }
        }
    }
    if (tape && any) {
        const int no = tape->make_node(out);
        std::vector<int> nodes;
        std::vector<std::int64_t> extents;
        for (const Tensor& x : xs) {
            nodes.push_back(tape->node_of(x));
            extents.push_back(x.extent(axis));
        }
        tape->record([no, nodes, extents, offsets, outer, inner, out_axis](Tape& t) {
            const std::vector<double>& go = t.grad(no);
            for (std::size_t i = 0; i < nodes.size(); ++i) {
                if (nodes[i] < 0) continue;
                std::vector<double>& gx = t.grad(nodes[i]);
                const std::int64_t xa = extents[i];
                for (std::int64_t ou = 0; ou < outer; ++ou) {
                    const double* src = go.data() + (ou * out_axis + offsets[i]) * inner;
                    double* dst = gx.data() + ou * xa * inner;
                    for (std::int64_t j = 0; j < xa * inner; ++j) dst[j] += src[j];
                }
            }
        });
    }
    return out;
}

Tensor slice(const Tensor& x, int axis, int start, int length) {
    const int r = x.rank();
    axis = normalize_axis(axis, r, "slice");
    const int extent = x.extent(axis);
    if (start < 0 || length <= 0 || start + length > extent) {
        throw std::invalid_argument("slice: range [" + std::to_string(start) + ", " +
                                    std::to_string(start + length) + ") out of bounds for extent " +
                                    std::to_string(extent));
    }
    std::vector<int> out_shape = x.shape();
    out_shape[static_cast<std::size_t>(axis)] = length;
    Tensor out(out_shape);

    std::int64_t outer = 1;
    for (int d = 0; d < axis; ++d) outer *= x.extent(d);
    std::int64_t inner = 1;
    for (int d = axis + 1; d < r; ++d) inner *= x.extent(d);

    for (std::int64_t ou = 0; ou < outer; ++ou) {
        const double* src = x.data() + (ou * extent + start) * inner;
        double* dst = out.data() + ou * length * inner;
        std::copy(src, src + static_cast<std::int64_t>(length) * inner, dst);
    }
    if (auto ctx = maybe_track({&x}, out)) {
        const int nx = ctx.tape->node_of(x);
        ctx.tape->record([nx, no = ctx.out, outer, inner, extent, start, length](Tape& t) {
            const std::vector<double>& go = t.grad(no);
            std::vector<double>& gx = t.grad(nx);
            for (std::int64_t ou = 0; ou < outer; ++ou) {
                const double* src = go.data() + ou * length * inner;
                double* dst = gx.data() + (ou * extent + start) * inner;
                for (std::int64_t j = 0; j < static_cast<std::int64_t>(length) * inner; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

Tensor shift2d(const Tensor& x, int dy, int dx) {
    const int r = x.rank();
    if (r < 2) {
        throw std::invalid_argument("shift2d: rank must be >= 2, got " + x.shape_str());
    }
    const int h = x.extent(r - 2);
    const int w = x.extent(r - 1);
    std::int64_t planes = 1;
    for (int d = 0; d < r - 2; ++d) planes *= x.extent(d);
    Tensor out(x.shape());
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    for (std::int64_t p = 0; p < planes; ++p) {
        const double* src = x.data() + p * plane;
        double* dst = out.data() + p * plane;
        for (int y = 0; y < h; ++y) {
            const int sy = y - dy;
            for (int xx = 0; xx < w; ++xx) {
                const int sx = xx - dx;
                dst[static_cast<std::int64_t>(y) * w + xx] =
                    (sy >= 0 && sy < h && sx >= 0 && sx < w) ? src[static_cast<std::int64_t>(sy) * w + sx] : 0.0;
            }
        }
    }
    if (auto ctx = maybe_track({&x}, out)) {
        const int nx = ctx.tape->node_of(x);
        ctx.tape->record([nx, no = ctx.out, planes, plane, h, w, dy, dx](Tape& t) {
            const std::vector<double>& go = t.grad(no);
            std::vector<double>& gx = t.grad(nx);
            for (std::int64_t p = 0; p < planes; ++p) {
                const double* src = go.data() + p * plane;
                double* dst = gx.data() + p * plane;
                for (int y = 0; y < h; ++y) {
                    const int sy = y - dy;
                    if (sy < 0 || sy >= h) continue;
                    for (int xx = 0; xx < w; ++xx) {
                        const int sx = xx - dx;
                        if (sx < 0 || sx >= w) continue;
                        dst[static_cast<std::int64_t>(sy) * w + sx] += src[static_cast<std::int64_t>(y) * w + xx];
                    }
                }
            }
        });
    }
    return out;
}

Tensor sum_all(const Tensor& x) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < x.size(); ++i) acc += x[i];
    Tensor out = Tensor::scalar(acc);
    if (auto ctx = maybe_track({&x}, out)) {
        const int nx = ctx.tape->node_of(x);
        ctx.tape->record([nx, no = ctx.out](Tape& t) {
            const double g = t.grad(no)[0];
            std::vector<double>& gx = t.grad(nx);
            for (double& v : gx) v += g;
        });
    }
    return out;
}

Tensor mean_all(const Tensor& x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.size())); }

Tensor sum_axis(const Tensor& x, int axis) {
    const int r = x.rank();
    axis = normalize_axis(axis, r, "sum_axis");
    const int extent = x.extent(axis);
    std::vector<int> out_shape;
    for (int d = 0; d < r; ++d) {
        if (d != axis) out_shape.push_back(x.extent(d));
    }
    if (out_shape.empty()) out_shape.push_back(1);

    std::int64_t outer = 1;
    for (int d = 0; d < axis; ++d) outer *= x.extent(d);
    std::int64_t inner = 1;
    for (int d = axis + 1; d < r; ++d) inner *= x.extent(d);

    Tensor out(out_shape);
    for (std::int64_t ou = 0; ou < outer; ++ou) {
        for (std::int64_t in = 0; in < inner; ++in) {
            double acc = 0.0;
            for (std::int64_t m = 0; m < extent; ++m) {
                acc += x[(ou * extent + m) * inner + in];
            }
            out[ou * inner + in] = acc;
        }
    }
    if (auto ctx = maybe_track({&x}, out)) {
        const int nx = ctx.tape->node_of(x);
        ctx.tape->record([nx, no = ctx.out, outer, inner, extent](Tape& t) {
            const std::vector<double>& go = t.grad(no);
            std::vector<double>& gx = t.grad(nx);
            for (std::int64_t ou = 0; ou < outer; ++ou) {
                for (std::int64_t in = 0; in < inner; ++in) {
                    const double g = go[static_cast<std::size_t>(ou * inner + in)];
                    for (std::int64_t m = 0; m < extent; ++m) {
                        gx[static_cast<std::size_t>((ou * extent + m) * inner + in)] += g;
                    }
                }
            }
        });
    }
    return out;
}

Tensor max_axis(const Tensor& x, int axis) {
    const int r = x.rank();
    axis = normalize_axis(axis, r, "max_axis");
    const int extent = x.extent(axis);
    std::vector<int> out_shape;
    for (int d = 0; d < r; ++d) {
        if (d != axis) out_shape.push_back(x.extent(d));
    }
    if (out_shape.empty()) out_shape.push_back(1);

    std::int64_t outer = 1;
    for (int d = 0; d < axis; ++d) outer *= x.extent(d);
    std::int64_t inner = 1;
    for (int d = axis + 1; d < r; ++d) inner *= x.extent(d);

    Tensor out(out_shape);
    std::vector<std::int64_t> argmax(static_cast<std::size_t>(outer * inner));
    for (std::int64_t ou = 0; ou < outer; ++ou) {
        for (std::int64_t in = 0; in < inner; ++in) {
            double best = -std::numeric_limits<double>::infinity();
            std::int64_t best_idx = 0;
            for (std::int64_t m = 0; m < extent; ++m) {
                const double v = x[(ou * extent + m) * inner + in];
                if (v > best) {
                    best = v;
                    best_idx = (ou * extent + m) * inner + in;
                }
            }
            out[ou * inner + in] = best;
            argmax[static_cast<std::size_t>(ou * inner + in)] = best_idx;
        }
    }
    if (auto ctx = maybe_track({&x}, out)) {
        const int nx = ctx.tape->node_of(x);
        ctx.tape->record([nx, no = ctx.out, argmax = std::move(argmax)](Tape& t) {
            const std::vector<double>& go = t.grad(no);
            std::vector<double>& gx = t.grad(nx);
            for (std::size_t i = 0; i < go.size(); ++i) {
                gx[static_cast<std::size_t>(argmax[i])] += go[i];
            }
        });
    }
    return out;
}

namespace {

// Shared forward for softmax and masked_softmax. An empty `validity` means all
// entries are valid.
Tensor softmax_impl(const Tensor& x, const std::vector<unsigned char>& validity, int axis, const char* name) {
    const int r = x.rank();
    axis = normalize_axis(axis, r, name);
    const int extent = x.extent(axis);
    std::int64_t outer = 1;
    for (int d = 0; d < axis; ++d) outer *= x.extent(d);
    std::int64_t inner = 1;
    for (int d = axis + 1; d < r; ++d) inner *= x.extent(d);

    const bool masked = !validity.empty();
    Tensor out(x.shape());
    for (std::int64_t ou = 0; ou < outer; ++ou) {
        for (std::int64_t in = 0; in < inner; ++in) {
            double mx = -std::numeric_limits<double>::infinity();
            int valid_count = 0;
            for (std::int64_t m = 0; m < extent; ++m) {
                const std::int64_t idx = (ou * extent + m) * inner + in;
                if (masked && !validity[static_cast<std::size_t>(idx)]) continue;
                ++valid_count;
                mx = std::max(mx, x[idx]);
            }
            if (masked && valid_count == 0) {
                throw std::invalid_argument(std::string(name) + ": slice with no valid entries");
            }
            double denom = 0.0;
            for (std::int64_t m = 0; m < extent; ++m) {
                const std::int64_t idx = (ou * extent + m) * inner + in;
                if (masked && !validity[static_cast<std::size_t>(idx)]) {
                    out[idx] = 0.0;
                    continue;
                }
                const double e = std::exp(x[idx] - mx);
                out[idx] = e;
                denom += e;
            }
            for (std::int64_t m = 0; m < extent; ++m) {
                const std::int64_t idx = (ou * extent + m) * inner + in;
                if (masked && !validity[static_cast<std::size_t>(idx)]) continue;
                out[idx] /= denom;
            }
        }
    }

    if (auto ctx = maybe_track({&x}, out)) {
        const int nx = ctx.tape->node_of(x);
        std::vector<double> yv = out.values();
        ctx.tape->record([nx, no = ctx.out, yv = std::move(yv), outer, inner, extent](Tape& t) {
            const std::vector<double>& go = t.grad(no);
            std::vector<double>& gx = t.grad(nx);
            for (std::int64_t ou = 0; ou < outer; ++ou) {
                for (std::int64_t in = 0; in < inner; ++in) {
                    double dot = 0.0;
                    for (std::int64_t m = 0; m < extent; ++m) {
                        const std::size_t idx = static_cast<std::size_t>((ou * extent + m) * inner + in);
                        dot += go[idx] * yv[idx];
                    }
                    for (std::int64_t m = 0; m < extent; ++m) {
                        const std::size_t idx = static_cast<std::size_t>((ou * extent + m) * inner + in);
                        gx[idx] += yv[idx] * (go[idx] - dot);
                    }
                }
            }
        });
    }
    return out;
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) { return softmax_impl(x, {}, axis, "softmax"); }

Tensor masked_softmax(const Tensor& x, const Tensor& valid, int axis) {
    BroadcastPlan plan = make_broadcast(x.shape(), valid.shape(), "masked_softmax");
    if (plan.out_shape != x.shape()) {
        throw std::invalid_argument("masked_softmax: mask " + valid.shape_str() +
                                    " does not broadcast onto input " + x.shape_str());
    }
    std::vector<unsigned char> validity(static_cast<std::size_t>(x.size()));
    if (plan.same_shape) {
        for (std::int64_t i = 0; i < x.size(); ++i) validity[static_cast<std::size_t>(i)] = valid[i] != 0.0;
    } else {
        const double* pv = valid.data();
        for_each_broadcast(plan, [&](std::int64_t o, std::int64_t, std::int64_t bi) {
            validity[static_cast<std::size_t>(o)] = pv[bi] != 0.0;
        });
    }
    return softmax_impl(x, validity, axis, "masked_softmax");
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride) {
    if (x.rank() != 3 || w.rank() != 4) {
        throw std::invalid_argument("conv2d: expected input [C,H,W] and kernel [Co,Ci,kh,kw], got " +
                                    x.shape_str() + " and " + w.shape_str());
    }
    if (stride < 1) {
        throw std::invalid_argument("conv2d: stride must be >= 1");
    }
    const int ci = x.extent(0);
    const int h = x.extent(1);
    const int wdt = x.extent(2);
    const int co = w.extent(0);
    const int kh = w.extent(2);
    const int kw = w.extent(3);
    if (w.extent(1) != ci) {
        throw std::invalid_argument("conv2d: channel mismatch: input " + x.shape_str() + ", kernel " +
                                    w.shape_str());
    }
    if (bias.rank() != 1 || bias.extent(0) != co) {
        throw std::invalid_argument("conv2d: bias shape " + bias.shape_str() + " does not match kernel " +
                                    w.shape_str());
    }
    const int oh = (h + stride - 1) / stride;
    const int ow = (wdt + stride - 1) / stride;
    const int pad_h = std::max(0, (oh - 1) * stride + kh - h);
    const int pad_w = std::max(0, (ow - 1) * stride + kw - wdt);
    if (kh > h + pad_h || kw > wdt + pad_w) {
        throw std::invalid_argument("conv2d: kernel " + w.shape_str() + " larger than padded input " +
                                    x.shape_str());
    }
    const int pad_top = pad_h / 2;
    const int pad_left = pad_w / 2;

    Tensor out({co, oh, ow});
    for (int oc = 0; oc < co; ++oc) {
        const double b = bias[oc];
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                double acc = b;
                for (int ic = 0; ic < ci; ++ic) {
                    for (int ky = 0; ky < kh; ++ky) {
                        const int iy = oy * stride + ky - pad_top;
                        if (iy < 0 || iy >= h) continue;
                        for (int kx = 0; kx < kw; ++kx) {
                            const int ix = ox * stride + kx - pad_left;
                            if (ix < 0 || ix >= wdt) continue;
                            acc += x[(static_cast<std::int64_t>(ic) * h + iy) * wdt + ix] *
                                   w[((static_cast<std::int64_t>(oc) * ci + ic) * kh + ky) * kw + kx];
                        }
                    }
                }
                out[(static_cast<std::int64_t>(oc) * oh + oy) * ow + ox] = acc;
            }
        }
    }

    if (auto ctx = maybe_track({&x, &w, &bias}, out)) {
        const int nx = ctx.tape->node_of(x);
        const int nw = ctx.tape->node_of(w);
        const int nb = ctx.tape->node_of(bias);
        std::vector<double> xv;
        std::vector<double> wv;
        if (nw >= 0) xv = x.values();
        if (nx >= 0) wv = w.values();
        ctx.tape->record([nx, nw, nb, no = ctx.out, xv = std::move(xv), wv = std::move(wv), ci, h, wdt, co, kh, kw,
                          oh, ow, stride, pad_top, pad_left](Tape& t) {
            const std::vector<double>& go = t.grad(no);
            std::vector<double>* gx = nx >= 0 ? &t.grad(nx) : nullptr;
            std::vector<double>* gw = nw >= 0 ? &t.grad(nw) : nullptr;
            std::vector<double>* gb = nb >= 0 ? &t.grad(nb) : nullptr;
            for (int oc = 0; oc < co; ++oc) {
                for (int oy = 0; oy < oh; ++oy) {
                    for (int ox = 0; ox < ow; ++ox) {
                        const double g = go[static_cast<std::size_t>((static_cast<std::int64_t>(oc) * oh + oy) * ow + ox)];
                        if (g == 0.0) continue;
                        if (gb) (*gb)[static_cast<std::size_t>(oc)] += g;
                        for (int ic = 0; ic < ci; ++ic) {
                            for (int ky = 0; ky < kh; ++ky) {
                                const int iy = oy * stride + ky - pad_top;
                                if (iy < 0 || iy >= h) continue;
                                for (int kx = 0; kx < kw; ++kx) {
                                    const int ix = ox * stride + kx - pad_left;
                                    if (ix < 0 || ix >= wdt) continue;
                                    const std::size_t xi =
                                        static_cast<std::size_t>((static_cast<std::int64_t>(ic) * h + iy) * wdt + ix);
                                    const std::size_t wi = static_cast<std::size_t>(
                                        ((static_cast<std::int64_t>(oc) * ci + ic) * kh + ky) * kw + kx);
                                    if (gw) (*gw)[wi] += xv[xi] * g;
                                    if (gx) (*gx)[xi] += wv[wi] * g;
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

Tensor max_pool_peaks(const Tensor& h, int kernel) {
    if (kernel < 1 || kernel % 2 == 0) {
        throw std::invalid_argument("max_pool_peaks: kernel must be odd and positive");
    }
    const int r = h.rank();
    if (r < 2) {
        throw std::invalid_argument("max_pool_peaks: rank must be >= 2, got " + h.shape_str());
    }
    const int hh = h.extent(r - 2);
    const int ww = h.extent(r - 1);
    std::int64_t planes = 1;
    for (int d = 0; d < r - 2; ++d) planes *= h.extent(d);
    const int half = kernel / 2;
    Tensor out(h.shape());
    const std::int64_t plane = static_cast<std::int64_t>(hh) * ww;
    for (std::int64_t p = 0; p < planes; ++p) {
        const double* src = h.data() + p * plane;
        double* dst = out.data() + p * plane;
        for (int y = 0; y < hh; ++y) {
            for (int x = 0; x < ww; ++x) {
                const double v = src[static_cast<std::int64_t>(y) * ww + x];
                double mx = -std::numeric_limits<double>::infinity();
                for (int dy = -half; dy <= half; ++dy) {
                    const int ny = y + dy;
                    if (ny < 0 || ny >= hh) continue;
                    for (int dx = -half; dx <= half; ++dx) {
                        const int nx = x + dx;
                        if (nx < 0 || nx >= ww) continue;
                        mx = std::max(mx, src[static_cast<std::int64_t>(ny) * ww + nx]);
                    }
                }
                dst[static_cast<std::int64_t>(y) * ww + x] = (v == mx) ? 1.0 : 0.0;
            }
        }
    }
    return out;  // binary mask: not recorded on the tape
}

Tensor gather_cells(const Tensor& x, const std::vector<int>& cells) {
    if (x.rank() != 3) {
        throw std::invalid_argument("gather_cells: expected [C,H,W], got " + x.shape_str());
    }
    if (cells.empty()) {
        throw std::invalid_argument("gather_cells: no cells");
    }
    const int c = x.extent(0);
    const std::int64_t hw = static_cast<std::int64_t>(x.extent(1)) * x.extent(2);
    for (int cell : cells) {
        if (cell < 0 || cell >= hw) {
            throw std::invalid_argument("gather_cells: cell index out of range");
        }
    }
    const int m = static_cast<int>(cells.size());
    Tensor out({m, c});
    for (int i = 0; i < m; ++i) {
        for (int ch = 0; ch < c; ++ch) {
            out[static_cast<std::int64_t>(i) * c + ch] = x[static_cast<std::int64_t>(ch) * hw + cells[static_cast<std::size_t>(i)]];
        }
    }
    if (auto ctx = maybe_track({&x}, out)) {
        const int nx = ctx.tape->node_of(x);
        ctx.tape->record([nx, no = ctx.out, cells, c, hw, m](Tape& t) {
            const std::vector<double>& go = t.grad(no);
            std::vector<double>& gx = t.grad(nx);
            for (int i = 0; i < m; ++i) {
                for (int ch = 0; ch < c; ++ch) {
                    gx[static_cast<std::size_t>(static_cast<std::int64_t>(ch) * hw + cells[static_cast<std::size_t>(i)])] +=
                        go[static_cast<std::size_t>(static_cast<std::int64_t>(i) * c + ch)];
                }
            }
        });
    }
    return out;
}

Tensor scatter_max_columns(const Tensor& feats, const std::vector<int>& columns, int height, int width) {
    if (feats.rank() != 2) {
        throw std::invalid_argument("scatter_max_columns: expected [V,C], got " + feats.shape_str());
    }
    const int v = feats.extent(0);
    const int c = feats.extent(1);
    if (static_cast<int>(columns.size()) != v) {
        throw std::invalid_argument("scatter_max_columns: column count does not match rows");
    }
    const std::int64_t hw = static_cast<std::int64_t>(height) * width;
    for (int col : columns) {
        if (col < 0 || col >= hw) {
            throw std::invalid_argument("scatter_max_columns: column index out of range");
        }
    }
    Tensor out({c, height, width});
    // argmax row per (channel, column); -1 if the column is empty
    std::vector<std::int64_t> argrow(static_cast<std::size_t>(c * hw), -1);
    for (int row = 0; row < v; ++row) {
        const int col = columns[static_cast<std::size_t>(row)];
        for (int ch = 0; ch < c; ++ch) {
            const double val = feats[static_cast<std::int64_t>(row) * c + ch];
            const std::size_t key = static_cast<std::size_t>(static_cast<std::int64_t>(ch) * hw + col);
            if (argrow[key] < 0 || val > out[static_cast<std::int64_t>(key)]) {
                out[static_cast<std::int64_t>(key)] = val;
                argrow[key] = row;
            }
        }
    }
    if (auto ctx = maybe_track({&feats}, out)) {
        const int nf = ctx.tape->node_of(feats);
        ctx.tape->record([nf, no = ctx.out, argrow = std::move(argrow), c, hw](Tape& t) {
            const std::vector<double>& go = t.grad(no);
            std::vector<double>& gf = t.grad(nf);
            for (std::size_t key = 0; key < argrow.size(); ++key) {
                const std::int64_t row = argrow[key];
                if (row < 0) continue;
                const int ch = static_cast<int>(static_cast<std::int64_t>(key) / hw);
                gf[static_cast<std::size_t>(row * c + ch)] += go[key];
            }
        });
    }
    return out;
}

}  // namespace focalcomm
