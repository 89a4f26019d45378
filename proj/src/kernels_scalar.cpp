#include "mmdc/kernels.hpp"

#include <cmath>

#include "mmdc/thread_pool.hpp"

// Reference kernels. Plain loops, no FMA contraction surprises: these
// define the semantics the wide variants are tested against.

namespace mmdc::kern {
namespace {

void s_add(const float* a, const float* b, float* y, int64_t n) {
    pool::parallel_for(n, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) y[i] = a[i] + b[i];
    });
}

void s_sub(const float* a, const float* b, float* y, int64_t n) {
    pool::parallel_for(n, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) y[i] = a[i] - b[i];
    });
}

void s_mul(const float* a, const float* b, float* y, int64_t n) {
    pool::parallel_for(n, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) y[i] = a[i] * b[i];
    });
}

void s_scale(const float* x, float a, float* y, int64_t n) {
    pool::parallel_for(n, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) y[i] = a * x[i];
    });
}

void s_axpy(float a, const float* x, float* y, int64_t n) {
    pool::parallel_for(n, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) y[i] += a * x[i];
    });
}

void s_fmadd(const float* a, const float* b, float* y, int64_t n) {
    pool::parallel_for(n, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) y[i] += a[i] * b[i];
    });
}

constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluA = 0.044715f;

void s_gelu(const float* x, float* y, int64_t n) {
    pool::parallel_for(n, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            const float v = x[i];
            const float u = kGeluC * (v + kGeluA * v * v * v);
            y[i] = 0.5f * v * (1.0f + std::tanh(u));
        }
    });
}

void s_gelu_grad(const float* x, const float* dy, float* dx, int64_t n) {
    pool::parallel_for(n, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            const float v = x[i];
            const float u = kGeluC * (v + kGeluA * v * v * v);
            const float t = std::tanh(u);
            const float du = kGeluC * (1.0f + 3.0f * kGeluA * v * v);
            const float d = 0.5f * (1.0f + t) + 0.5f * v * (1.0f - t * t) * du;
            dx[i] += d * dy[i];
        }
    });
}

double s_sum(const float* x, int64_t n) {
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i) s += x[i];
    return s;
}

double s_sumsq(const float* x, int64_t n) {
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i) s += double(x[i]) * double(x[i]);
    return s;
}

float s_dot(const float* a, const float* b, int64_t n) {
    float s = 0.0f;
    for (int64_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

bool s_all_finite(const float* x, int64_t n) {
    for (int64_t i = 0; i < n; ++i) {
        if (!std::isfinite(x[i])) return false;
    }
    return true;
}

template <bool Acc>
void mm_nn(const float* a, const float* b, float* c, int m, int k, int n) {
    pool::parallel_for(m, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            float* ci = c + i * n;
            if (!Acc) {
                for (int j = 0; j < n; ++j) ci[j] = 0.0f;
            }
            const float* ai = a + i * k;
            for (int p = 0; p < k; ++p) {
                const float av = ai[p];
                const float* bp = b + int64_t(p) * n;
                for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
            }
        }
    });
}

template <bool Acc>
void mm_nt(const float* a, const float* b, float* c, int m, int k, int n) {
    pool::parallel_for(m, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            const float* ai = a + i * k;
            float* ci = c + i * n;
            for (int j = 0; j < n; ++j) {
                const float* bj = b + int64_t(j) * k;
                float s = 0.0f;
                for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
                if (Acc) ci[j] += s; else ci[j] = s;
            }
        }
    });
}

// C[M,N] += A[R,M]ᵀ·B[R,N]; r blocked so B stays cache-resident
void mm_tn_acc(const float* a, const float* b, float* c, int r, int m, int n) {
    constexpr int kRb = 128;
    pool::parallel_for(m, [&](int64_t lo, int64_t hi) {
        for (int r0 = 0; r0 < r; r0 += kRb) {
            const int r1 = std::min(r0 + kRb, r);
            for (int64_t i = lo; i < hi; ++i) {
                float* ci = c + i * n;
                for (int p = r0; p < r1; ++p) {
                    const float av = a[int64_t(p) * m + i];
                    const float* bp = b + int64_t(p) * n;
                    for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
                }
            }
        }
    });
}

void s_adamw(float* p, const float* g, float* m, float* v, int64_t n,
             float lr, float b1, float b2, float bc1, float bc2, float eps, float wd) {
    pool::parallel_for(n, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            const float gi = g[i];
            m[i] = b1 * m[i] + (1.0f - b1) * gi;
            v[i] = b2 * v[i] + (1.0f - b2) * gi * gi;
            const float mhat = m[i] / bc1;
            const float vhat = v[i] / bc2;
            p[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * p[i]);
        }
    });
}

}  // namespace

const Ops& scalar_ops() {
    static const Ops t = {
        "scalar",
        s_add, s_sub, s_mul, s_scale, s_axpy, s_fmadd, s_gelu, s_gelu_grad,
        s_sum, s_sumsq, s_dot, s_all_finite,
        mm_nn<false>, mm_nn<true>, mm_nt<false>, mm_nt<true>, mm_tn_acc,
        s_adamw,
    };
    return t;
}

}  // namespace mmdc::kern
