// Scalar vs AVX2 kernel equivalence. The scalar table is the reference;
// wide variants must agree within float32 reassociation slack, and a
// double-precision oracle bounds both matmul paths.

#include <cmath>
#include <vector>

#include "doctest.h"
#include "mmdc/kernels.hpp"
#include "mmdc/rng.hpp"
#include "mmdc/thread_pool.hpp"

using namespace mmdc;

namespace {

std::vector<float> random_vec(int64_t n, Rng& rng, float scale = 1.0f) {
    std::vector<float> v(static_cast<size_t>(n));
    for (auto& x : v) x = scale * rng.normal();
    return v;
}

void check_close(const std::vector<float>& a, const std::vector<float>& b, double atol,
                 double rtol) {
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = std::abs(double(a[i]) - double(b[i]));
        const double bound = atol + rtol * std::max(std::abs(double(a[i])), std::abs(double(b[i])));
        if (d > bound) {
            CAPTURE(i);
            CAPTURE(a[i]);
            CAPTURE(b[i]);
            REQUIRE(d <= bound);
        }
    }
}

// reference matmul in double
std::vector<float> mm_ref(const std::vector<float>& a, const std::vector<float>& b, int m, int k,
                          int n, bool bt) {
    std::vector<float> c(static_cast<size_t>(m) * n);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double s = 0.0;
            for (int p = 0; p < k; ++p)
                s += double(a[size_t(i) * k + p]) * double(bt ? b[size_t(j) * k + p] : b[size_t(p) * n + j]);
            c[size_t(i) * n + j] = static_cast<float>(s);
        }
    return c;
}

}  // namespace

TEST_CASE("dispatch reports a usable table") {
    CHECK(kern::ops().name != nullptr);
    if (kern::have_avx2()) CHECK(std::string(kern::avx2_ops().name) == "avx2");
    CHECK(std::string(kern::scalar_ops().name) == "scalar");
}

TEST_CASE("elementwise kernels agree across tables") {
    if (!kern::have_avx2()) return;
    const auto& s = kern::scalar_ops();
    const auto& v = kern::avx2_ops();
    Rng rng(7);
    for (int64_t n : {1, 7, 8, 64, 1000, 4096}) {
        auto a = random_vec(n, rng);
        auto b = random_vec(n, rng);
        std::vector<float> ys(a.size()), yv(a.size());

        s.add(a.data(), b.data(), ys.data(), n);
        v.add(a.data(), b.data(), yv.data(), n);
        CHECK(ys == yv);

        s.sub(a.data(), b.data(), ys.data(), n);
        v.sub(a.data(), b.data(), yv.data(), n);
        CHECK(ys == yv);

        s.mul(a.data(), b.data(), ys.data(), n);
        v.mul(a.data(), b.data(), yv.data(), n);
        CHECK(ys == yv);

        s.scale(a.data(), 0.37f, ys.data(), n);
        v.scale(a.data(), 0.37f, yv.data(), n);
        CHECK(ys == yv);

        ys = b;
        yv = b;
        s.axpy(-1.3f, a.data(), ys.data(), n);
        v.axpy(-1.3f, a.data(), yv.data(), n);
        check_close(ys, yv, 1e-7, 1e-6);

        ys = b;
        yv = b;
        s.fmadd(a.data(), b.data(), ys.data(), n);
        v.fmadd(a.data(), b.data(), yv.data(), n);
        check_close(ys, yv, 1e-7, 1e-6);
    }
}

TEST_CASE("gelu wide variant tracks scalar tanh form") {
    if (!kern::have_avx2()) return;
    Rng rng(11);
    const int64_t n = 3000;
    auto x = random_vec(n, rng, 3.0f);
    std::vector<float> ys(x.size()), yv(x.size());
    kern::scalar_ops().gelu(x.data(), ys.data(), n);
    kern::avx2_ops().gelu(x.data(), yv.data(), n);
    check_close(ys, yv, 2e-6, 2e-6);

    auto dy = random_vec(n, rng);
    std::vector<float> ds(x.size(), 0.0f), dv(x.size(), 0.0f);
    kern::scalar_ops().gelu_grad(x.data(), dy.data(), ds.data(), n);
    kern::avx2_ops().gelu_grad(x.data(), dy.data(), dv.data(), n);
    check_close(ds, dv, 5e-6, 5e-6);
}

TEST_CASE("matmul variants agree with double oracle") {
    Rng rng(3);
    struct Case {
        int m, k, n;
    };
    for (const auto& c : {Case{1, 1, 1}, Case{5, 3, 7}, Case{22, 16, 22}, Case{33, 64, 48},
                          Case{70, 64, 384}, Case{64, 256, 64}}) {
        auto a = random_vec(int64_t(c.m) * c.k, rng);
        auto b = random_vec(int64_t(c.k) * c.n, rng);
        auto bt = random_vec(int64_t(c.n) * c.k, rng);
        const auto ref_nn = mm_ref(a, b, c.m, c.k, c.n, false);
        const auto ref_nt = mm_ref(a, bt, c.m, c.k, c.n, true);

        for (const kern::Ops* t : {&kern::scalar_ops(), kern::have_avx2() ? &kern::avx2_ops() : nullptr}) {
            if (!t) continue;
            std::vector<float> out(ref_nn.size(), 42.0f);
            t->matmul_nn(a.data(), b.data(), out.data(), c.m, c.k, c.n);
            check_close(out, ref_nn, 1e-5, 1e-5);

            t->matmul_nt(a.data(), bt.data(), out.data(), c.m, c.k, c.n);
            check_close(out, ref_nt, 1e-5, 1e-5);

            // acc variants: start from a bias and subtract it again
            std::vector<float> acc(ref_nn.size(), 1.0f);
            t->matmul_nn_acc(a.data(), b.data(), acc.data(), c.m, c.k, c.n);
            for (auto& x : acc) x -= 1.0f;
            check_close(acc, ref_nn, 2e-5, 2e-5);

            acc.assign(ref_nt.size(), 0.5f);
            t->matmul_nt_acc(a.data(), bt.data(), acc.data(), c.m, c.k, c.n);
            for (auto& x : acc) x -= 0.5f;
            check_close(acc, ref_nt, 2e-5, 2e-5);
        }
    }
}

TEST_CASE("matmul_tn_acc equals transposed oracle") {
    Rng rng(5);
    const int r = 130, m = 48, n = 64;  // r spans the blocking boundary
    auto a = random_vec(int64_t(r) * m, rng);
    auto b = random_vec(int64_t(r) * n, rng);
    // oracle: C[m,n] = sum_r A[r,m] * B[r,n]
    std::vector<float> ref(size_t(m) * n);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double s = 0.0;
            for (int p = 0; p < r; ++p) s += double(a[size_t(p) * m + i]) * double(b[size_t(p) * n + j]);
            ref[size_t(i) * n + j] = static_cast<float>(s);
        }
    for (const kern::Ops* t : {&kern::scalar_ops(), kern::have_avx2() ? &kern::avx2_ops() : nullptr}) {
        if (!t) continue;
        std::vector<float> out(ref.size(), 0.0f);
        t->matmul_tn_acc(a.data(), b.data(), out.data(), r, m, n);
        check_close(out, ref, 1e-5, 1e-5);
    }
}

TEST_CASE("adamw update identical across tables") {
    if (!kern::have_avx2()) return;
    Rng rng(9);
    const int64_t n = 1003;
    auto p0 = random_vec(n, rng);
    auto g = random_vec(n, rng);
    auto ps = p0, pv = p0;
    std::vector<float> ms(n, 0.0f), vs(n, 0.0f), mv(n, 0.0f), vv(n, 0.0f);
    for (int step = 1; step <= 3; ++step) {
        const float bc1 = 1.0f - std::pow(0.9f, float(step));
        const float bc2 = 1.0f - std::pow(0.999f, float(step));
        kern::scalar_ops().adamw(ps.data(), g.data(), ms.data(), vs.data(), n, 1e-3f, 0.9f, 0.999f,
                                 bc1, bc2, 1e-8f, 0.01f);
        kern::avx2_ops().adamw(pv.data(), g.data(), mv.data(), vv.data(), n, 1e-3f, 0.9f, 0.999f,
                               bc1, bc2, 1e-8f, 0.01f);
    }
    CHECK(ps == pv);
    CHECK(ms == mv);
    CHECK(vs == vv);
}

TEST_CASE("all_finite flags NaN and Inf anywhere") {
    Rng rng(13);
    for (const kern::Ops* t : {&kern::scalar_ops(), kern::have_avx2() ? &kern::avx2_ops() : nullptr}) {
        if (!t) continue;
        auto x = random_vec(513, rng);
        CHECK(t->all_finite(x.data(), int64_t(x.size())));
        for (size_t pos : {size_t(0), size_t(7), size_t(511), size_t(512)}) {
            auto bad = x;
            bad[pos] = std::numeric_limits<float>::quiet_NaN();
            CHECK_FALSE(t->all_finite(bad.data(), int64_t(bad.size())));
            bad[pos] = std::numeric_limits<float>::infinity();
            CHECK_FALSE(t->all_finite(bad.data(), int64_t(bad.size())));
        }
    }
}

TEST_CASE("set_active switches tables") {
    const std::string before = kern::active_name();
    CHECK(kern::set_active("scalar"));
    CHECK(std::string(kern::active_name()) == "scalar");
    CHECK_FALSE(kern::set_active("neon"));
    kern::set_active(before);
}
