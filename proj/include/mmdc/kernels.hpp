#pragma once

#include <cstdint>
#include <string_view>

namespace mmdc::kern {

// Flat float32 primitives behind the tensor engine. Every op writes each
// output element from exactly one thread, so results are reproducible for
// any pool size. The scalar table is the reference; wide variants are
// equivalence-tested against it.
struct Ops {
    const char* name;

    // elementwise
    void (*add)(const float* a, const float* b, float* y, int64_t n);
    void (*sub)(const float* a, const float* b, float* y, int64_t n);
    void (*mul)(const float* a, const float* b, float* y, int64_t n);
    void (*scale)(const float* x, float a, float* y, int64_t n);   // y = a*x
    void (*axpy)(float a, const float* x, float* y, int64_t n);    // y += a*x
    void (*fmadd)(const float* a, const float* b, float* y, int64_t n);  // y += a.*b
    void (*gelu)(const float* x, float* y, int64_t n);             // tanh form
    void (*gelu_grad)(const float* x, const float* dy, float* dx, int64_t n);  // dx += gelu'(x).*dy

    // reductions (double accumulators, fixed order)
    double (*sum)(const float* x, int64_t n);
    double (*sumsq)(const float* x, int64_t n);
    float (*dot)(const float* a, const float* b, int64_t n);
    bool (*all_finite)(const float* x, int64_t n);

    // row-major matmul; M/K/N name the contraction as C[M,N] over K
    void (*matmul_nn)(const float* a, const float* b, float* c, int m, int k, int n);      // C  = A[M,K]·B[K,N]
    void (*matmul_nn_acc)(const float* a, const float* b, float* c, int m, int k, int n);  // C += A[M,K]·B[K,N]
    void (*matmul_nt)(const float* a, const float* b, float* c, int m, int k, int n);      // C  = A[M,K]·B[N,K]ᵀ
    void (*matmul_nt_acc)(const float* a, const float* b, float* c, int m, int k, int n);  // C += A[M,K]·B[N,K]ᵀ
    void (*matmul_tn_acc)(const float* a, const float* b, float* c, int r, int m, int n);  // C[M,N] += A[R,M]ᵀ·B[R,N]

    // fused AdamW update; bc1/bc2 are the bias-correction denominators
    void (*adamw)(float* p, const float* g, float* m, float* v, int64_t n,
                  float lr, float b1, float b2, float bc1, float bc2, float eps, float wd);
};

const Ops& scalar_ops();
bool have_avx2();
const Ops& avx2_ops();  // valid only when have_avx2()

// Active table. Picked once: AVX2 when the CPU supports it, else scalar;
// MMDC_KERNELS=scalar|avx2 overrides.
const Ops& ops();
// Force a table by name ("scalar"/"avx2"); false if unavailable.
bool set_active(std::string_view name);
const char* active_name();

}  // namespace mmdc::kern
