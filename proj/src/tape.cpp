#include "mmdc/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "mmdc/kernels.hpp"
#include "mmdc/thread_pool.hpp"

namespace mmdc {

namespace {

const kern::Ops& K() { return kern::ops(); }

void require(bool ok, const char* op, const std::string& msg) {
    if (!ok) throw ShapeError(std::string(op) + ": " + msg);
}

void require_same_shape(const char* op, const NdArray& a, const NdArray& b) {
    if (a.shape != b.shape)
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape));
}

int64_t rows_of(const NdArray& a) {
    require(a.ndim() >= 1, "rowwise", "rank-0 input");
    return a.size() / a.shape.back();
}

// prod(shape[0..axis)), shape[axis], prod(shape[axis+1..))
struct AxisSplit {
    int64_t outer, axis, inner;
};
AxisSplit axis_split(const NdArray& a, int axis) {
    AxisSplit s{1, a.shape[static_cast<size_t>(axis)], 1};
    for (int i = 0; i < axis; ++i) s.outer *= a.shape[static_cast<size_t>(i)];
    for (int i = axis + 1; i < a.ndim(); ++i) s.inner *= a.shape[static_cast<size_t>(i)];
    return s;
}

}  // namespace

Tape::Id Tape::push(NdArray value, const char* op, std::initializer_list<Id> parents,
                    std::function<void(Tape&)> back) {
    check_finite(value, op);
    const Id id = static_cast<Id>(nodes_.size());
    bool needs_any = false;
    for (Id p : parents) {
        if (p < 0) continue;
        if (p >= id) throw ShapeError(std::string(op) + ": tape order violated (cycle)");
        needs_any = needs_any || nodes_[static_cast<size_t>(p)].needs;
    }
    Node n;
    n.val = std::move(value);
    n.op = op;
    n.needs = grad_enabled_ && needs_any;
    if (n.needs) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return id;
}

float* Tape::grad_buf(Id id) {
    Node& n = node(id);
    if (n.grad.empty()) n.grad.assign(n.val.data.size(), 0.0f);
    return n.grad.data();
}

Tape::Id Tape::leaf(NdArray value, bool needs_grad) {
    check_finite(value, "leaf");
    const Id id = static_cast<Id>(nodes_.size());
    Node n;
    n.val = std::move(value);
    n.needs = grad_enabled_ && needs_grad;
    nodes_.push_back(std::move(n));
    return id;
}

Tape::Id Tape::param(NdArray* p, bool trainable) {
    NdArray copy;
    copy.shape = p->shape;
    copy.data = p->data;
    const Id id = leaf(std::move(copy), trainable);
    if (grad_enabled_ && trainable) bindings_.push_back({p, id});
    return id;
}

Tape::Id Tape::add(Id a, Id b) {
    const NdArray& va = val(a);
    const NdArray& vb = val(b);
    require_same_shape("add", va, vb);
    NdArray out(va.shape);
    K().add(va.data.data(), vb.data.data(), out.data.data(), out.size());
    return push(std::move(out), "add", {a, b}, [a, b, id = size()](Tape& t) {
        const auto& dy = t.node(id).grad;
        if (t.needs(a)) K().axpy(1.0f, dy.data(), t.grad_buf(a), static_cast<int64_t>(dy.size()));
        if (t.needs(b)) K().axpy(1.0f, dy.data(), t.grad_buf(b), static_cast<int64_t>(dy.size()));
    });
}

Tape::Id Tape::sub(Id a, Id b) {
    const NdArray& va = val(a);
    const NdArray& vb = val(b);
    require_same_shape("sub", va, vb);
    NdArray out(va.shape);
    K().sub(va.data.data(), vb.data.data(), out.data.data(), out.size());
    return push(std::move(out), "sub", {a, b}, [a, b, id = size()](Tape& t) {
        const auto& dy = t.node(id).grad;
        if (t.needs(a)) K().axpy(1.0f, dy.data(), t.grad_buf(a), static_cast<int64_t>(dy.size()));
        if (t.needs(b)) K().axpy(-1.0f, dy.data(), t.grad_buf(b), static_cast<int64_t>(dy.size()));
    });
}

Tape::Id Tape::mul(Id a, Id b) {
    const NdArray& va = val(a);
    const NdArray& vb = val(b);
    require_same_shape("mul", va, vb);
    NdArray out(va.shape);
    K().mul(va.data.data(), vb.data.data(), out.data.data(), out.size());
    return push(std::move(out), "mul", {a, b}, [a, b, id = size()](Tape& t) {
        const auto& dy = t.node(id).grad;
        const int64_t n = static_cast<int64_t>(dy.size());
        if (t.needs(a)) K().fmadd(dy.data(), t.data(b), t.grad_buf(a), n);
        if (t.needs(b)) K().fmadd(dy.data(), t.data(a), t.grad_buf(b), n);
    });
}

Tape::Id Tape::scale(Id a, float c) {
    const NdArray& va = val(a);
    NdArray out(va.shape);
    K().scale(va.data.data(), c, out.data.data(), out.size());
    return push(std::move(out), "scale", {a}, [a, c, id = size()](Tape& t) {
        const auto& dy = t.node(id).grad;
        if (t.needs(a)) K().axpy(c, dy.data(), t.grad_buf(a), static_cast<int64_t>(dy.size()));
    });
}

Tape::Id Tape::gelu(Id a) {
    const NdArray& va = val(a);
    NdArray out(va.shape);
    K().gelu(va.data.data(), out.data.data(), out.size());
    return push(std::move(out), "gelu", {a}, [a, id = size()](Tape& t) {
        const auto& dy = t.node(id).grad;
        if (t.needs(a))
            K().gelu_grad(t.data(a), dy.data(), t.grad_buf(a), static_cast<int64_t>(dy.size()));
    });
}

Tape::Id Tape::matmul(Id a, Id b) {
    const NdArray& va = val(a);
    const NdArray& vb = val(b);
    require(va.ndim() == 2 && vb.ndim() == 2, "matmul", "expects 2-d operands, got " +
                shape_str(va.shape) + " and " + shape_str(vb.shape));
    require(va.shape[1] == vb.shape[0], "matmul",
            "inner dims differ: " + shape_str(va.shape) + " vs " + shape_str(vb.shape));
    const int m = va.shape[0], k = va.shape[1], n = vb.shape[1];
    NdArray out(Shape{m, n});
    K().matmul_nn(va.data.data(), vb.data.data(), out.data.data(), m, k, n);
    return push(std::move(out), "matmul", {a, b}, [a, b, m, k, n, id = size()](Tape& t) {
        const float* dy = t.node(id).grad.data();
        if (t.needs(a)) K().matmul_nt_acc(dy, t.data(b), t.grad_buf(a), m, n, k);
        if (t.needs(b)) K().matmul_tn_acc(t.data(a), dy, t.grad_buf(b), m, k, n);
    });
}

Tape::Id Tape::linear(Id x, Id w, Id b) {
    const NdArray& vx = val(x);
    const NdArray& vw = val(w);
    require(vw.ndim() == 2, "linear", "weight must be 2-d, got " + shape_str(vw.shape));
    const int k = vw.shape[0], n = vw.shape[1];
    require(vx.shape.back() == k, "linear",
            "input " + shape_str(vx.shape) + " does not match weight " + shape_str(vw.shape));
    const int64_t r = vx.size() / k;
    Shape out_shape = vx.shape;
    out_shape.back() = n;
    NdArray out(out_shape);
    if (b >= 0) {
        const NdArray& vb = val(b);
        require(vb.ndim() == 1 && vb.shape[0] == n, "linear",
                "bias " + shape_str(vb.shape) + " does not match weight " + shape_str(vw.shape));
        for (int64_t i = 0; i < r; ++i)
            std::memcpy(out.data.data() + i * n, vb.data.data(), sizeof(float) * size_t(n));
        K().matmul_nn_acc(vx.data.data(), vw.data.data(), out.data.data(), int(r), k, n);
    } else {
        K().matmul_nn(vx.data.data(), vw.data.data(), out.data.data(), int(r), k, n);
    }
    return push(std::move(out), "linear", {x, w, b}, [x, w, b, r, k, n, id = size()](Tape& t) {
        const float* dy = t.node(id).grad.data();
        if (t.needs(x)) K().matmul_nt_acc(dy, t.data(w), t.grad_buf(x), int(r), n, k);
        if (t.needs(w)) K().matmul_tn_acc(t.data(x), dy, t.grad_buf(w), int(r), k, n);
        if (b >= 0 && t.needs(b)) {
            float* db = t.grad_buf(b);
            for (int64_t i = 0; i < r; ++i) K().axpy(1.0f, dy + i * n, db, n);
        }
    });
}

Tape::Id Tape::bmm_nt(Id a, Id b) {
    const NdArray& va = val(a);
    const NdArray& vb = val(b);
    require(va.ndim() == 3 && vb.ndim() == 3 && va.shape[0] == vb.shape[0] &&
                va.shape[2] == vb.shape[2],
            "bmm_nt", "incompatible shapes " + shape_str(va.shape) + " and " + shape_str(vb.shape));
    const int g = va.shape[0], m = va.shape[1], k = va.shape[2], n = vb.shape[1];
    NdArray out(Shape{g, m, n});
    {
        const float* pa = va.data.data();
        const float* pb = vb.data.data();
        float* pc = out.data.data();
        pool::parallel_for(g, [&](int64_t lo, int64_t hi) {
            for (int64_t i = lo; i < hi; ++i)
                K().matmul_nt(pa + i * m * k, pb + i * n * k, pc + i * m * n, m, k, n);
        });
    }
    return push(std::move(out), "bmm_nt", {a, b}, [a, b, g, m, k, n, id = size()](Tape& t) {
        const float* dy = t.node(id).grad.data();
        if (t.needs(a)) {
            float* da = t.grad_buf(a);
            const float* pb = t.data(b);
            pool::parallel_for(g, [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i)
                    K().matmul_nn_acc(dy + i * m * n, pb + i * n * k, da + i * m * k, m, n, k);
            });
        }
        if (t.needs(b)) {
            float* db = t.grad_buf(b);
            const float* pa = t.data(a);
            pool::parallel_for(g, [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i)
                    K().matmul_tn_acc(dy + i * m * n, pa + i * m * k, db + i * n * k, m, n, k);
            });
        }
    });
}

Tape::Id Tape::bmm_nn(Id a, Id b) {
    const NdArray& va = val(a);
    const NdArray& vb = val(b);
    require(va.ndim() == 3 && vb.ndim() == 3 && va.shape[0] == vb.shape[0] &&
                va.shape[2] == vb.shape[1],
            "bmm_nn", "incompatible shapes " + shape_str(va.shape) + " and " + shape_str(vb.shape));
    const int g = va.shape[0], m = va.shape[1], k = va.shape[2], n = vb.shape[2];
    NdArray out(Shape{g, m, n});
    {
        const float* pa = va.data.data();
        const float* pb = vb.data.data();
        float* pc = out.data.data();
        pool::parallel_for(g, [&](int64_t lo, int64_t hi) {
            for (int64_t i = lo; i < hi; ++i)
                K().matmul_nn(pa + i * m * k, pb + i * k * n, pc + i * m * n, m, k, n);
        });
    }
    return push(std::move(out), "bmm_nn", {a, b}, [a, b, g, m, k, n, id = size()](Tape& t) {
        const float* dy = t.node(id).grad.data();
        if (t.needs(a)) {
            float* da = t.grad_buf(a);
            const float* pb = t.data(b);
            pool::parallel_for(g, [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i)
                    K().matmul_nt_acc(dy + i * m * n, pb + i * k * n, da + i * m * k, m, n, k);
            });
        }
        if (t.needs(b)) {
            float* db = t.grad_buf(b);
            const float* pa = t.data(a);
            pool::parallel_for(g, [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i)
                    K().matmul_tn_acc(pa + i * m * k, dy + i * m * n, db + i * k * n, m, k, n);
            });
        }
    });
}

Tape::Id Tape::softmax(Id a) {
    const NdArray& va = val(a);
    const int n = va.shape.back();
    const int64_t rows = rows_of(va);
    NdArray out(va.shape);
    {
        const float* px = va.data.data();
        float* py = out.data.data();
        pool::parallel_for(rows, [&](int64_t lo, int64_t hi) {
            for (int64_t r = lo; r < hi; ++r) {
                const float* x = px + r * n;
                float* y = py + r * n;
                float mx = x[0];
                for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
                double s = 0.0;
                for (int i = 0; i < n; ++i) {
                    y[i] = std::exp(x[i] - mx);
                    s += y[i];
                }
                const float inv = static_cast<float>(1.0 / s);
                for (int i = 0; i < n; ++i) y[i] *= inv;
            }
        });
    }
    const Id out_id = size();
    return push(std::move(out), "softmax", {a}, [a, n, rows, out_id](Tape& t) {
        if (!t.needs(a)) return;
        const float* dy = t.node(out_id).grad.data();
        const float* y = t.data(out_id);
        float* dx = t.grad_buf(a);
        pool::parallel_for(rows, [&](int64_t lo, int64_t hi) {
            for (int64_t r = lo; r < hi; ++r) {
                const float* yr = y + r * n;
                const float* dyr = dy + r * n;
                float* dxr = dx + r * n;
                double dot = 0.0;
                for (int i = 0; i < n; ++i) dot += double(dyr[i]) * double(yr[i]);
                const float d = static_cast<float>(dot);
                for (int i = 0; i < n; ++i) dxr[i] += yr[i] * (dyr[i] - d);
            }
        });
    });
}

Tape::Id Tape::layernorm(Id a, float eps) {
    const NdArray& va = val(a);
    const int n = va.shape.back();
    const int64_t rows = rows_of(va);
    NdArray out(va.shape);
    auto inv_std = std::make_shared<std::vector<float>>(static_cast<size_t>(rows));
    {
        const float* px = va.data.data();
        float* py = out.data.data();
        float* pinv = inv_std->data();
        pool::parallel_for(rows, [&](int64_t lo, int64_t hi) {
            for (int64_t r = lo; r < hi; ++r) {
                const float* x = px + r * n;
                float* y = py + r * n;
                double mu = 0.0;
                for (int i = 0; i < n; ++i) mu += x[i];
                mu /= n;
                double var = 0.0;
                for (int i = 0; i < n; ++i) {
                    const double d = x[i] - mu;
                    var += d * d;
                }
                var /= n;
                const float inv = static_cast<float>(1.0 / std::sqrt(var + eps));
                const float muf = static_cast<float>(mu);
                pinv[r] = inv;
                for (int i = 0; i < n; ++i) y[i] = (x[i] - muf) * inv;
            }
        });
    }
    const Id out_id = size();
    return push(std::move(out), "layernorm", {a}, [a, n, rows, inv_std, out_id](Tape& t) {
        if (!t.needs(a)) return;
        const float* dy = t.node(out_id).grad.data();
        const float* y = t.data(out_id);
        float* dx = t.grad_buf(a);
        const float* pinv = inv_std->data();
        pool::parallel_for(rows, [&](int64_t lo, int64_t hi) {
            for (int64_t r = lo; r < hi; ++r) {
                const float* yr = y + r * n;
                const float* dyr = dy + r * n;
                float* dxr = dx + r * n;
                double m1 = 0.0, m2 = 0.0;
                for (int i = 0; i < n; ++i) {
                    m1 += dyr[i];
                    m2 += double(dyr[i]) * double(yr[i]);
                }
                const float f1 = static_cast<float>(m1 / n);
                const float f2 = static_cast<float>(m2 / n);
                for (int i = 0; i < n; ++i) dxr[i] += pinv[r] * (dyr[i] - f1 - yr[i] * f2);
            }
        });
    });
}

Tape::Id Tape::concat(Id a, Id b, int axis) {
    const NdArray& va = val(a);
    const NdArray& vb = val(b);
    require(va.ndim() == vb.ndim() && axis >= 0 && axis < va.ndim(), "concat",
            "bad axis for " + shape_str(va.shape) + " and " + shape_str(vb.shape));
    for (int i = 0; i < va.ndim(); ++i) {
        if (i != axis)
            require(va.shape[size_t(i)] == vb.shape[size_t(i)], "concat",
                    "non-axis dims differ: " + shape_str(va.shape) + " vs " + shape_str(vb.shape));
    }
    Shape out_shape = va.shape;
    out_shape[size_t(axis)] += vb.shape[size_t(axis)];
    NdArray out(out_shape);
    const AxisSplit sa = axis_split(va, axis);
    const AxisSplit sb = axis_split(vb, axis);
    const int64_t wa = sa.axis * sa.inner;
    const int64_t wb = sb.axis * sb.inner;
    for (int64_t o = 0; o < sa.outer; ++o) {
        std::memcpy(out.data.data() + o * (wa + wb), va.data.data() + o * wa,
                    sizeof(float) * size_t(wa));
        std::memcpy(out.data.data() + o * (wa + wb) + wa, vb.data.data() + o * wb,
                    sizeof(float) * size_t(wb));
    }
    return push(std::move(out), "concat", {a, b},
                [a, b, outer = sa.outer, wa, wb, id = size()](Tape& t) {
                    const float* dy = t.node(id).grad.data();
                    if (t.needs(a)) {
                        float* da = t.grad_buf(a);
                        for (int64_t o = 0; o < outer; ++o)
                            K().axpy(1.0f, dy + o * (wa + wb), da + o * wa, wa);
                    }
                    if (t.needs(b)) {
                        float* db = t.grad_buf(b);
                        for (int64_t o = 0; o < outer; ++o)
                            K().axpy(1.0f, dy + o * (wa + wb) + wa, db + o * wb, wb);
                    }
                });
}

std::vector<Tape::Id> Tape::split(Id a, int axis, const std::vector<int>& sizes) {
    const NdArray& va = val(a);
    require(axis >= 0 && axis < va.ndim(), "split", "bad axis for " + shape_str(va.shape));
    int total = 0;
    for (int s : sizes) total += s;
    require(total == va.shape[size_t(axis)], "split",
            "sizes sum " + std::to_string(total) + " != axis dim of " + shape_str(va.shape));
    const AxisSplit sp = axis_split(va, axis);
    const int64_t wfull = sp.axis * sp.inner;
    std::vector<Id> out_ids;
    int64_t off = 0;
    for (int s : sizes) {
        Shape cs = va.shape;
        cs[size_t(axis)] = s;
        NdArray child(cs);
        const int64_t wc = int64_t(s) * sp.inner;
        for (int64_t o = 0; o < sp.outer; ++o)
            std::memcpy(child.data.data() + o * wc, va.data.data() + o * wfull + off,
                        sizeof(float) * size_t(wc));
        out_ids.push_back(push(std::move(child), "split", {a},
                               [a, outer = sp.outer, wfull, off, wc, id = size()](Tape& t) {
                                   if (!t.needs(a)) return;
                                   const float* dy = t.node(id).grad.data();
                                   float* da = t.grad_buf(a);
                                   for (int64_t o = 0; o < outer; ++o)
                                       K().axpy(1.0f, dy + o * wc, da + o * wfull + off, wc);
                               }));
        off += wc;
    }
    return out_ids;
}

Tape::Id Tape::reshape(Id a, Shape s) {
    const NdArray& va = val(a);
    require(numel(s) == va.size(), "reshape",
            shape_str(va.shape) + " cannot reshape to " + shape_str(s));
    NdArray out;
    out.shape = std::move(s);
    out.data = va.data;
    return push(std::move(out), "reshape", {a}, [a, id = size()](Tape& t) {
        if (!t.needs(a)) return;
        const auto& dy = t.node(id).grad;
        K().axpy(1.0f, dy.data(), t.grad_buf(a), static_cast<int64_t>(dy.size()));
    });
}

Tape::Id Tape::split_heads(Id x, int heads) {
    const NdArray& vx = val(x);
    require(vx.ndim() == 3, "split_heads", "expects [B,S,D], got " + shape_str(vx.shape));
    const int b = vx.shape[0], s = vx.shape[1], d = vx.shape[2];
    require(d % heads == 0, "split_heads", "d_model not divisible by heads");
    const int dh = d / heads;
    NdArray out(Shape{b * heads, s, dh});
    const float* px = vx.data.data();
    float* py = out.data.data();
    for (int bi = 0; bi < b; ++bi)
        for (int h = 0; h < heads; ++h)
            for (int si = 0; si < s; ++si)
                std::memcpy(py + ((int64_t(bi) * heads + h) * s + si) * dh,
                            px + (int64_t(bi) * s + si) * d + h * dh, sizeof(float) * size_t(dh));
    return push(std::move(out), "split_heads", {x}, [x, b, s, d, heads, dh, id = size()](Tape& t) {
        if (!t.needs(x)) return;
        const float* dy = t.node(id).grad.data();
        float* dx = t.grad_buf(x);
        for (int bi = 0; bi < b; ++bi)
            for (int h = 0; h < heads; ++h)
                for (int si = 0; si < s; ++si)
                    K().axpy(1.0f, dy + ((int64_t(bi) * heads + h) * s + si) * dh,
                             dx + (int64_t(bi) * s + si) * d + h * dh, dh);
    });
}

Tape::Id Tape::merge_heads(Id x, int heads) {
    const NdArray& vx = val(x);
    require(vx.ndim() == 3 && vx.shape[0] % heads == 0, "merge_heads",
            "expects [B*h,S,dh], got " + shape_str(vx.shape));
    const int b = vx.shape[0] / heads, s = vx.shape[1], dh = vx.shape[2];
    const int d = dh * heads;
    NdArray out(Shape{b, s, d});
    const float* px = vx.data.data();
    float* py = out.data.data();
    for (int bi = 0; bi < b; ++bi)
        for (int h = 0; h < heads; ++h)
            for (int si = 0; si < s; ++si)
                std::memcpy(py + (int64_t(bi) * s + si) * d + h * dh,
                            px + ((int64_t(bi) * heads + h) * s + si) * dh,
                            sizeof(float) * size_t(dh));
    return push(std::move(out), "merge_heads", {x}, [x, b, s, d, heads, dh, id = size()](Tape& t) {
        if (!t.needs(x)) return;
        const float* dy = t.node(id).grad.data();
        float* dx = t.grad_buf(x);
        for (int bi = 0; bi < b; ++bi)
            for (int h = 0; h < heads; ++h)
                for (int si = 0; si < s; ++si)
                    K().axpy(1.0f, dy + (int64_t(bi) * s + si) * d + h * dh,
                             dx + ((int64_t(bi) * heads + h) * s + si) * dh, dh);
    });
}

namespace {
// out[b, gy*gw+gx, c*p*p + py*p + px] = img[b, c, (gy*p+py), (gx*p+px)]
template <bool Inverse, bool Acc>
void patch_move(const float* src, float* dst, int b, int c, int hw, int p) {
    const int g = hw / p;
    const int pd = c * p * p;
    const int64_t img_stride = int64_t(c) * hw * hw;
    const int64_t tok_stride = int64_t(g) * g * pd;
    for (int bi = 0; bi < b; ++bi)
        for (int ci = 0; ci < c; ++ci)
            for (int gy = 0; gy < g; ++gy)
                for (int py = 0; py < p; ++py)
                    for (int gx = 0; gx < g; ++gx)
                        for (int px = 0; px < p; ++px) {
                            const int64_t ii = bi * img_stride + (int64_t(ci) * hw + gy * p + py) * hw +
                                               gx * p + px;
                            const int64_t ti = bi * tok_stride + int64_t(gy * g + gx) * pd +
                                               ci * p * p + py * p + px;
                            const int64_t si = Inverse ? ti : ii;
                            const int64_t di = Inverse ? ii : ti;
                            if (Acc)
                                dst[di] += src[si];
                            else
                                dst[di] = src[si];
                        }
}
}  // namespace

Tape::Id Tape::patchify(Id img, int patch) {
    const NdArray& vi = val(img);
    require(vi.ndim() == 4 && vi.shape[2] == vi.shape[3], "patchify",
            "expects [B,C,H,H], got " + shape_str(vi.shape));
    const int b = vi.shape[0], c = vi.shape[1], hw = vi.shape[2];
    require(hw % patch == 0, "patchify", "image size not divisible by patch");
    const int g = hw / patch;
    NdArray out(Shape{b, g * g, c * patch * patch});
    patch_move<false, false>(vi.data.data(), out.data.data(), b, c, hw, patch);
    return push(std::move(out), "patchify", {img}, [img, b, c, hw, patch, id = size()](Tape& t) {
        if (!t.needs(img)) return;
        patch_move<true, true>(t.node(id).grad.data(), t.grad_buf(img), b, c, hw, patch);
    });
}

Tape::Id Tape::unpatchify(Id tok, int channels, int image_size, int patch) {
    const NdArray& vt = val(tok);
    const int g = image_size / patch;
    require(vt.ndim() == 3 && vt.shape[1] == g * g && vt.shape[2] == channels * patch * patch,
            "unpatchify", "token shape " + shape_str(vt.shape) + " does not match image geometry");
    const int b = vt.shape[0];
    NdArray out(Shape{b, channels, image_size, image_size});
    patch_move<true, false>(vt.data.data(), out.data.data(), b, channels, image_size, patch);
    return push(std::move(out), "unpatchify", {tok},
                [tok, b, channels, image_size, patch, id = size()](Tape& t) {
                    if (!t.needs(tok)) return;
                    patch_move<false, true>(t.node(id).grad.data(), t.grad_buf(tok), b, channels,
                                            image_size, patch);
                });
}

Tape::Id Tape::add_rows(Id x, Id rows) {
    const NdArray& vx = val(x);
    const NdArray& vr = val(rows);
    require(vx.ndim() == 3 && vr.ndim() == 2 && vx.shape[1] == vr.shape[0] &&
                vx.shape[2] == vr.shape[1],
            "add_rows", "incompatible " + shape_str(vx.shape) + " and " + shape_str(vr.shape));
    const int b = vx.shape[0];
    const int64_t w = int64_t(vx.shape[1]) * vx.shape[2];
    NdArray out(vx.shape);
    for (int bi = 0; bi < b; ++bi)
        K().add(vx.data.data() + bi * w, vr.data.data(), out.data.data() + bi * w, w);
    return push(std::move(out), "add_rows", {x, rows}, [x, rows, b, w, id = size()](Tape& t) {
        const float* dy = t.node(id).grad.data();
        if (t.needs(x)) K().axpy(1.0f, dy, t.grad_buf(x), b * w);
        if (t.needs(rows)) {
            float* dr = t.grad_buf(rows);
            for (int bi = 0; bi < b; ++bi) K().axpy(1.0f, dy + bi * w, dr, w);
        }
    });
}

Tape::Id Tape::affine_mod(Id x, Id sc, Id sh) {
    const NdArray& vx = val(x);
    const NdArray& vs = val(sc);
    const NdArray& vh = val(sh);
    require(vx.ndim() == 3 && vs.ndim() == 2 && vs.shape == vh.shape &&
                vx.shape[0] == vs.shape[0] && vx.shape[2] == vs.shape[1],
            "affine_mod", "incompatible " + shape_str(vx.shape) + " and " + shape_str(vs.shape));
    const int b = vx.shape[0], s = vx.shape[1], d = vx.shape[2];
    NdArray out(vx.shape);
    {
        const float* px = vx.data.data();
        const float* ps = vs.data.data();
        const float* ph = vh.data.data();
        float* py = out.data.data();
        pool::parallel_for(int64_t(b) * s, [&](int64_t lo, int64_t hi) {
            for (int64_t r = lo; r < hi; ++r) {
                const int bi = static_cast<int>(r / s);
                const float* xr = px + r * d;
                float* yr = py + r * d;
                const float* sb = ps + int64_t(bi) * d;
                const float* hb = ph + int64_t(bi) * d;
                for (int i = 0; i < d; ++i) yr[i] = xr[i] * (1.0f + sb[i]) + hb[i];
            }
        });
    }
    return push(std::move(out), "affine_mod", {x, sc, sh},
                [x, sc, sh, b, s, d, id = size()](Tape& t) {
                    const float* dy = t.node(id).grad.data();
                    const float* px = t.data(x);
                    const float* ps = t.data(sc);
                    if (t.needs(x)) {
                        float* dx = t.grad_buf(x);
                        pool::parallel_for(int64_t(b) * s, [&](int64_t lo, int64_t hi) {
                            for (int64_t r = lo; r < hi; ++r) {
                                const int bi = static_cast<int>(r / s);
                                const float* sb = ps + int64_t(bi) * d;
                                for (int i = 0; i < d; ++i)
                                    dx[r * d + i] += dy[r * d + i] * (1.0f + sb[i]);
                            }
                        });
                    }
                    if (t.needs(sc)) {
                        float* ds = t.grad_buf(sc);
                        pool::parallel_for(b, [&](int64_t lo, int64_t hi) {
                            for (int64_t bi = lo; bi < hi; ++bi)
                                for (int si = 0; si < s; ++si) {
                                    const int64_t r = bi * s + si;
                                    K().fmadd(dy + r * d, px + r * d, ds + bi * d, d);
                                }
                        });
                    }
                    if (t.needs(sh)) {
                        float* dh = t.grad_buf(sh);
                        pool::parallel_for(b, [&](int64_t lo, int64_t hi) {
                            for (int64_t bi = lo; bi < hi; ++bi)
                                for (int si = 0; si < s; ++si)
                                    K().axpy(1.0f, dy + (bi * s + si) * d, dh + bi * d, d);
                        });
                    }
                });
}

Tape::Id Tape::gate(Id x, Id g) {
    const NdArray& vx = val(x);
    const NdArray& vg = val(g);
    require(vx.ndim() == 3 && vg.ndim() == 2 && vx.shape[0] == vg.shape[0] &&
                vx.shape[2] == vg.shape[1],
            "gate", "incompatible " + shape_str(vx.shape) + " and " + shape_str(vg.shape));
    const int b = vx.shape[0], s = vx.shape[1], d = vx.shape[2];
    NdArray out(vx.shape);
    {
        const float* px = vx.data.data();
        const float* pg = vg.data.data();
        float* py = out.data.data();
        pool::parallel_for(int64_t(b) * s, [&](int64_t lo, int64_t hi) {
            for (int64_t r = lo; r < hi; ++r) {
                const int bi = static_cast<int>(r / s);
                K().mul(px + r * d, pg + int64_t(bi) * d, py + r * d, d);
            }
        });
    }
    return push(std::move(out), "gate", {x, g}, [x, g, b, s, d, id = size()](Tape& t) {
        const float* dy = t.node(id).grad.data();
        const float* px = t.data(x);
        const float* pg = t.data(g);
        if (t.needs(x)) {
            float* dx = t.grad_buf(x);
            pool::parallel_for(int64_t(b) * s, [&](int64_t lo, int64_t hi) {
                for (int64_t r = lo; r < hi; ++r) {
                    const int bi = static_cast<int>(r / s);
                    K().fmadd(dy + r * d, pg + int64_t(bi) * d, dx + r * d, d);
                }
            });
        }
        if (t.needs(g)) {
            float* dg = t.grad_buf(g);
            pool::parallel_for(b, [&](int64_t lo, int64_t hi) {
                for (int64_t bi = lo; bi < hi; ++bi)
                    for (int si = 0; si < s; ++si) {
                        const int64_t r = bi * s + si;
                        K().fmadd(dy + r * d, px + r * d, dg + bi * d, d);
                    }
            });
        }
    });
}

Tape::Id Tape::embed(Id table, const std::vector<int>& ids, int batch, int seq) {
    const NdArray& vt = val(table);
    require(vt.ndim() == 2, "embed", "table must be 2-d, got " + shape_str(vt.shape));
    require(static_cast<int64_t>(ids.size()) == int64_t(batch) * seq, "embed",
            "ids length != batch*seq");
    const int v = vt.shape[0], d = vt.shape[1];
    for (int tok : ids) {
        if (tok < 0 || tok >= v)
            throw ShapeError("embed: token id " + std::to_string(tok) + " out of range [0," +
                             std::to_string(v) + ")");
    }
    NdArray out(Shape{batch, seq, d});
    for (size_t i = 0; i < ids.size(); ++i)
        std::memcpy(out.data.data() + i * size_t(d), vt.data.data() + size_t(ids[i]) * d,
                    sizeof(float) * size_t(d));
    return push(std::move(out), "embed", {table}, [table, ids, d, id = size()](Tape& t) {
        if (!t.needs(table)) return;
        const float* dy = t.node(id).grad.data();
        float* dt = t.grad_buf(table);
        // scatter-add; serial because token ids may repeat
        for (size_t i = 0; i < ids.size(); ++i)
            K().axpy(1.0f, dy + i * size_t(d), dt + size_t(ids[i]) * d, d);
    });
}

Tape::Id Tape::mean_all(Id a) {
    const NdArray& va = val(a);
    const int64_t n = va.size();
    NdArray out = NdArray::scalar(static_cast<float>(K().sum(va.data.data(), n) / double(n)));
    return push(std::move(out), "mean", {a}, [a, n, id = size()](Tape& t) {
        if (!t.needs(a)) return;
        const float dy = t.node(id).grad[0] / static_cast<float>(n);
        float* da = t.grad_buf(a);
        pool::parallel_for(n, [&](int64_t lo, int64_t hi) {
            for (int64_t i = lo; i < hi; ++i) da[i] += dy;
        });
    });
}

Tape::Id Tape::sum_all(Id a) {
    const NdArray& va = val(a);
    const int64_t n = va.size();
    NdArray out = NdArray::scalar(static_cast<float>(K().sum(va.data.data(), n)));
    return push(std::move(out), "sum", {a}, [a, n, id = size()](Tape& t) {
        if (!t.needs(a)) return;
        const float dy = t.node(id).grad[0];
        float* da = t.grad_buf(a);
        pool::parallel_for(n, [&](int64_t lo, int64_t hi) {
            for (int64_t i = lo; i < hi; ++i) da[i] += dy;
        });
    });
}

Tape::Id Tape::mse(Id a, Id b) {
    const NdArray& va = val(a);
    const NdArray& vb = val(b);
    require_same_shape("mse", va, vb);
    const int64_t n = va.size();
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double d = double(va.data[size_t(i)]) - double(vb.data[size_t(i)]);
        s += d * d;
    }
    NdArray out = NdArray::scalar(static_cast<float>(s / double(n)));
    return push(std::move(out), "mse", {a, b}, [a, b, n, id = size()](Tape& t) {
        const float c = 2.0f * t.node(id).grad[0] / static_cast<float>(n);
        const float* pa = t.data(a);
        const float* pb = t.data(b);
        if (t.needs(a)) {
            float* da = t.grad_buf(a);
            pool::parallel_for(n, [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i) da[i] += c * (pa[i] - pb[i]);
            });
        }
        if (t.needs(b)) {
            float* db = t.grad_buf(b);
            pool::parallel_for(n, [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i) db[i] -= c * (pa[i] - pb[i]);
            });
        }
    });
}

void Tape::backward(Id loss) {
    if (!grad_enabled_) throw NumericError("backward: tape was built with grad disabled");
    if (backward_done_) throw NumericError("backward: tape already swept");
    if (loss < 0 || loss >= size()) throw ShapeError("backward: loss node out of range");
    Node& ln = node(loss);
    if (ln.val.size() != 1)
        throw ShapeError("backward: loss must be scalar, got " + shape_str(ln.val.shape));
    backward_done_ = true;
    ln.grad.assign(1, 1.0f);
    for (Id id = loss; id >= 0; --id) {
        Node& n = node(id);
        if (n.back && n.needs && !n.grad.empty()) n.back(*this);
    }
    for (const Binding& b : bindings_) {
        const Node& n = node(b.node);
        if (n.grad.empty()) continue;
        b.target->ensure_grad();
        K().axpy(1.0f, n.grad.data(), b.target->grad.data(), static_cast<int64_t>(n.grad.size()));
    }
}

}  // namespace mmdc
