// AVX2+FMA kernel variants. Compiled with -mavx2 -mfma for this TU only;
// dispatch guards execution behind a CPUID check. Scalar table defines
// the reference semantics; reductions reuse the scalar path so summation
// order stays fixed.

#include "mmdc/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

#include <algorithm>
#include <cmath>

#include "mmdc/thread_pool.hpp"

namespace mmdc::kern {
namespace {

void v_add(const float* a, const float* b, float* y, int64_t n) {
    pool::parallel_for(n, [&](int64_t lo, int64_t hi) {
        int64_t i = lo;
        for (; i + 8 <= hi; i += 8) {
            _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
        }
        for (; i < hi; ++i) y[i] = a[i] + b[i];
    });
}

void v_sub(const float* a, const float* b, float* y, int64_t n) {
    pool::parallel_for(n, [&](int64_t lo, int64_t hi) {
        int64_t i = lo;
        for (; i + 8 <= hi; i += 8) {
            _mm256_storeu_ps(y + i, _mm256_sub_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
        }
        for (; i < hi; ++i) y[i] = a[i] - b[i];
    });
}

void v_mul(const float* a, const float* b, float* y, int64_t n) {
    pool::parallel_for(n, [&](int64_t lo, int64_t hi) {
        int64_t i = lo;
        for (; i + 8 <= hi; i += 8) {
            _mm256_storeu_ps(y + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
        }
        for (; i < hi; ++i) y[i] = a[i] * b[i];
    });
}

void v_scale(const float* x, float a, float* y, int64_t n) {
    const __m256 va = _mm256_set1_ps(a);
    pool::parallel_for(n, [&](int64_t lo, int64_t hi) {
        int64_t i = lo;
        for (; i + 8 <= hi; i += 8) {
            _mm256_storeu_ps(y + i, _mm256_mul_ps(va, _mm256_loadu_ps(x + i)));
        }
        for (; i < hi; ++i) y[i] = a * x[i];
    });
}

void v_axpy(float a, const float* x, float* y, int64_t n) {
    const __m256 va = _mm256_set1_ps(a);
    pool::parallel_for(n, [&](int64_t lo, int64_t hi) {
        int64_t i = lo;
        for (; i + 8 <= hi; i += 8) {
            __m256 vy = _mm256_loadu_ps(y + i);
            vy = _mm256_add_ps(vy, _mm256_mul_ps(va, _mm256_loadu_ps(x + i)));
            _mm256_storeu_ps(y + i, vy);
        }
        for (; i < hi; ++i) y[i] += a * x[i];
    });
}

void v_fmadd(const float* a, const float* b, float* y, int64_t n) {
    pool::parallel_for(n, [&](int64_t lo, int64_t hi) {
        int64_t i = lo;
        for (; i + 8 <= hi; i += 8) {
            __m256 vy = _mm256_loadu_ps(y + i);
            vy = _mm256_add_ps(vy, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
            _mm256_storeu_ps(y + i, vy);
        }
        for (; i < hi; ++i) y[i] += a[i] * b[i];
    });
}

// exp on 8 lanes, Cephes polynomial
inline __m256 exp256(__m256 x) {
    const __m256 hi = _mm256_set1_ps(88.3762626647949f);
    const __m256 lo = _mm256_set1_ps(-88.3762626647949f);
    const __m256 log2e = _mm256_set1_ps(1.44269504088896341f);
    const __m256 c1 = _mm256_set1_ps(0.693359375f);
    const __m256 c2 = _mm256_set1_ps(-2.12194440e-4f);
    const __m256 one = _mm256_set1_ps(1.0f);

    x = _mm256_min_ps(x, hi);
    x = _mm256_max_ps(x, lo);

    __m256 fx = _mm256_fmadd_ps(x, log2e, _mm256_set1_ps(0.5f));
    fx = _mm256_floor_ps(fx);
    x = _mm256_fnmadd_ps(fx, c1, x);
    x = _mm256_fnmadd_ps(fx, c2, x);

    const __m256 z = _mm256_mul_ps(x, x);
    __m256 y = _mm256_set1_ps(1.9875691500e-4f);
    y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(1.3981999507e-3f));
    y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(8.3334519073e-3f));
    y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(4.1665795894e-2f));
    y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(1.6666665459e-1f));
    y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(5.0000001201e-1f));
    y = _mm256_fmadd_ps(y, z, _mm256_add_ps(x, one));

    const __m256i emm0 = _mm256_slli_epi32(
        _mm256_add_epi32(_mm256_cvttps_epi32(fx), _mm256_set1_epi32(0x7f)), 23);
    return _mm256_mul_ps(y, _mm256_castsi256_ps(emm0));
}

inline __m256 tanh256(__m256 x) {
    // tanh(x) = 1 - 2/(exp(2x)+1)
    const __m256 one = _mm256_set1_ps(1.0f);
    const __m256 two = _mm256_set1_ps(2.0f);
    const __m256 e = exp256(_mm256_mul_ps(two, x));
    return _mm256_sub_ps(one, _mm256_div_ps(two, _mm256_add_ps(e, one)));
}

constexpr float kGeluC = 0.7978845608028654f;
constexpr float kGeluA = 0.044715f;

void v_gelu(const float* x, float* y, int64_t n) {
    const __m256 cc = _mm256_set1_ps(kGeluC);
    const __m256 ca = _mm256_set1_ps(kGeluA);
    const __m256 half = _mm256_set1_ps(0.5f);
    const __m256 one = _mm256_set1_ps(1.0f);
    pool::parallel_for(n, [&](int64_t lo, int64_t hi) {
        int64_t i = lo;
        for (; i + 8 <= hi; i += 8) {
            const __m256 v = _mm256_loadu_ps(x + i);
            const __m256 v3 = _mm256_mul_ps(v, _mm256_mul_ps(v, v));
            const __m256 u = _mm256_mul_ps(cc, _mm256_fmadd_ps(ca, v3, v));
            const __m256 t = tanh256(u);
            _mm256_storeu_ps(y + i, _mm256_mul_ps(_mm256_mul_ps(half, v), _mm256_add_ps(one, t)));
        }
        for (; i < hi; ++i) {
            const float v = x[i];
            const float u = kGeluC * (v + kGeluA * v * v * v);
            y[i] = 0.5f * v * (1.0f + std::tanh(u));
        }
    });
}

void v_gelu_grad(const float* x, const float* dy, float* dx, int64_t n) {
    const __m256 cc = _mm256_set1_ps(kGeluC);
    const __m256 ca = _mm256_set1_ps(kGeluA);
    const __m256 ca3 = _mm256_set1_ps(3.0f * kGeluA);
    const __m256 half = _mm256_set1_ps(0.5f);
    const __m256 one = _mm256_set1_ps(1.0f);
    pool::parallel_for(n, [&](int64_t lo, int64_t hi) {
        int64_t i = lo;
        for (; i + 8 <= hi; i += 8) {
            const __m256 v = _mm256_loadu_ps(x + i);
            const __m256 v2 = _mm256_mul_ps(v, v);
            const __m256 u = _mm256_mul_ps(cc, _mm256_fmadd_ps(ca, _mm256_mul_ps(v2, v), v));
            const __m256 t = tanh256(u);
            const __m256 du = _mm256_mul_ps(cc, _mm256_fmadd_ps(ca3, v2, one));
            const __m256 sech2 = _mm256_fnmadd_ps(t, t, one);
            __m256 d = _mm256_mul_ps(half, _mm256_add_ps(one, t));
            d = _mm256_fmadd_ps(_mm256_mul_ps(half, v), _mm256_mul_ps(sech2, du), d);
            __m256 vdx = _mm256_loadu_ps(dx + i);
            vdx = _mm256_fmadd_ps(d, _mm256_loadu_ps(dy + i), vdx);
            _mm256_storeu_ps(dx + i, vdx);
        }
        for (; i < hi; ++i) {
            const float v = x[i];
            const float u = kGeluC * (v + kGeluA * v * v * v);
            const float t = std::tanh(u);
            const float du = kGeluC * (1.0f + 3.0f * kGeluA * v * v);
            dx[i] += (0.5f * (1.0f + t) + 0.5f * v * (1.0f - t * t) * du) * dy[i];
        }
    });
}

bool v_all_finite(const float* x, int64_t n) {
    const __m256i expmask = _mm256_set1_epi32(0x7f800000);
    int64_t i = 0;
    __m256i bad = _mm256_setzero_si256();
    for (; i + 8 <= n; i += 8) {
        const __m256i v = _mm256_castps_si256(_mm256_loadu_ps(x + i));
        const __m256i e = _mm256_and_si256(v, expmask);
        bad = _mm256_or_si256(bad, _mm256_cmpeq_epi32(e, expmask));
        if ((i & 1023) == 0 && !_mm256_testz_si256(bad, bad)) return false;
    }
    if (!_mm256_testz_si256(bad, bad)) return false;
    for (; i < n; ++i) {
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
                const __m256 av = _mm256_set1_ps(ai[p]);
                const float* bp = b + int64_t(p) * n;
                int j = 0;
                for (; j + 8 <= n; j += 8) {
                    __m256 cv = _mm256_loadu_ps(ci + j);
                    cv = _mm256_fmadd_ps(av, _mm256_loadu_ps(bp + j), cv);
                    _mm256_storeu_ps(ci + j, cv);
                }
                for (; j < n; ++j) ci[j] += ai[p] * bp[j];
            }
        }
    });
}

inline float hsum256(__m256 v) {
    const __m128 lo = _mm256_castps256_ps128(v);
    const __m128 hi = _mm256_extractf128_ps(v, 1);
    __m128 s = _mm_add_ps(lo, hi);
    s = _mm_hadd_ps(s, s);
    s = _mm_hadd_ps(s, s);
    return _mm_cvtss_f32(s);
}

template <bool Acc>
void mm_nt(const float* a, const float* b, float* c, int m, int k, int n) {
    pool::parallel_for(m, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            const float* ai = a + i * k;
            float* ci = c + i * n;
            for (int j = 0; j < n; ++j) {
                const float* bj = b + int64_t(j) * k;
                __m256 acc = _mm256_setzero_ps();
                int p = 0;
                for (; p + 8 <= k; p += 8) {
                    acc = _mm256_fmadd_ps(_mm256_loadu_ps(ai + p), _mm256_loadu_ps(bj + p), acc);
                }
                float s = hsum256(acc);
                for (; p < k; ++p) s += ai[p] * bj[p];
                if (Acc) ci[j] += s; else ci[j] = s;
            }
        }
    });
}

void mm_tn_acc(const float* a, const float* b, float* c, int r, int m, int n) {
    constexpr int kRb = 128;
    pool::parallel_for(m, [&](int64_t lo, int64_t hi) {
        for (int r0 = 0; r0 < r; r0 += kRb) {
            const int r1 = std::min(r0 + kRb, r);
            for (int64_t i = lo; i < hi; ++i) {
                float* ci = c + i * n;
                for (int p = r0; p < r1; ++p) {
                    const __m256 av = _mm256_set1_ps(a[int64_t(p) * m + i]);
                    const float* bp = b + int64_t(p) * n;
                    int j = 0;
                    for (; j + 8 <= n; j += 8) {
                        __m256 cv = _mm256_loadu_ps(ci + j);
                        cv = _mm256_fmadd_ps(av, _mm256_loadu_ps(bp + j), cv);
                        _mm256_storeu_ps(ci + j, cv);
                    }
                    for (; j < n; ++j) ci[j] += a[int64_t(p) * m + i] * bp[j];
                }
            }
        }
    });
}

// mul/add kept separate (no FMA) so this matches the scalar update bitwise
void v_adamw(float* p, const float* g, float* m, float* v, int64_t n,
             float lr, float b1, float b2, float bc1, float bc2, float eps, float wd) {
    const __m256 vb1 = _mm256_set1_ps(b1);
    const __m256 vb2 = _mm256_set1_ps(b2);
    const __m256 v1b1 = _mm256_set1_ps(1.0f - b1);
    const __m256 v1b2 = _mm256_set1_ps(1.0f - b2);
    const __m256 vbc1 = _mm256_set1_ps(bc1);
    const __m256 vbc2 = _mm256_set1_ps(bc2);
    const __m256 veps = _mm256_set1_ps(eps);
    const __m256 vlr = _mm256_set1_ps(lr);
    const __m256 vwd = _mm256_set1_ps(wd);
    pool::parallel_for(n, [&](int64_t lo, int64_t hi) {
        int64_t i = lo;
        for (; i + 8 <= hi; i += 8) {
            const __m256 gi = _mm256_loadu_ps(g + i);
            __m256 mi = _mm256_loadu_ps(m + i);
            __m256 vi = _mm256_loadu_ps(v + i);
            mi = _mm256_add_ps(_mm256_mul_ps(vb1, mi), _mm256_mul_ps(v1b1, gi));
            vi = _mm256_add_ps(_mm256_mul_ps(vb2, vi), _mm256_mul_ps(v1b2, _mm256_mul_ps(gi, gi)));
            _mm256_storeu_ps(m + i, mi);
            _mm256_storeu_ps(v + i, vi);
            const __m256 mhat = _mm256_div_ps(mi, vbc1);
            const __m256 vhat = _mm256_div_ps(vi, vbc2);
            const __m256 denom = _mm256_add_ps(_mm256_sqrt_ps(vhat), veps);
            __m256 pi = _mm256_loadu_ps(p + i);
            const __m256 step =
                _mm256_mul_ps(vlr, _mm256_add_ps(_mm256_div_ps(mhat, denom), _mm256_mul_ps(vwd, pi)));
            _mm256_storeu_ps(p + i, _mm256_sub_ps(pi, step));
        }
        for (; i < hi; ++i) {
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

const Ops& avx2_ops() {
    const Ops& s = scalar_ops();
    static const Ops t = {
        "avx2",
        v_add, v_sub, v_mul, v_scale, v_axpy, v_fmadd, v_gelu, v_gelu_grad,
        s.sum, s.sumsq, s.dot, v_all_finite,
        mm_nn<false>, mm_nn<true>, mm_nt<false>, mm_nt<true>, mm_tn_acc,
        v_adamw,
    };
    return t;
}

bool have_avx2() {
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
}

}  // namespace mmdc::kern

#else  // non-x86: scalar only

namespace mmdc::kern {
bool have_avx2() { return false; }
const Ops& avx2_ops() { return scalar_ops(); }
}  // namespace mmdc::kern

#endif
