#include "mmdc/optim.hpp"

#include <cmath>

#include "mmdc/kernels.hpp"
#include "mmdc/rng.hpp"

namespace mmdc {

AdamW::AdamW(std::vector<std::pair<std::string, NdArray*>> params, AdamWConfig cfg) : cfg_(cfg) {
    slots_.reserve(params.size());
    for (auto& [name, p] : params) {
        Slot s;
        s.name = std::move(name);
        s.p = p;
        s.m.assign(p->data.size(), 0.0f);
        s.v.assign(p->data.size(), 0.0f);
        slots_.push_back(std::move(s));
    }
}

void AdamW::step() {
    for (const Slot& s : slots_) {
        if (!s.p->has_grad()) throw NumericError("adamw: missing grad for parameter " + s.name);
        if (!kern::ops().all_finite(s.p->grad.data(), s.p->size()))
            throw NumericError("adamw: non-finite grad for parameter " + s.name);
    }
    ++t_;
    const float bc1 = 1.0f - std::pow(cfg_.beta1, static_cast<float>(t_));
    const float bc2 = 1.0f - std::pow(cfg_.beta2, static_cast<float>(t_));
    for (Slot& s : slots_) {
        kern::ops().adamw(s.p->data.data(), s.p->grad.data(), s.m.data(), s.v.data(), s.p->size(),
                          cfg_.lr, cfg_.beta1, cfg_.beta2, bc1, bc2, cfg_.eps, cfg_.weight_decay);
    }
}

void AdamW::zero_grad() {
    for (Slot& s : slots_) {
        s.p->ensure_grad();
        s.p->zero_grad();
    }
}

double finite_diff_check(const std::function<double()>& f, std::vector<NdArray*> params,
                         int n_coords, float step, uint64_t seed) {
    const double f0 = f();
    if (f() != f0) throw NumericError("finite_diff_check: function is not deterministic");

    int64_t total = 0;
    for (const NdArray* p : params) total += p->size();
    if (total == 0) return 0.0;

    Rng rng(mix_seed(seed, 0xfd));
    double worst = 0.0;
    for (int c = 0; c < n_coords; ++c) {
        // pick a coordinate uniformly over all parameter elements
        const uint64_t r64 = (uint64_t(rng.next_u32()) << 32) | rng.next_u32();
        int64_t flat = static_cast<int64_t>(r64 % static_cast<uint64_t>(total));
        size_t pi = 0;
        while (flat >= params[pi]->size()) {
            flat -= params[pi]->size();
            ++pi;
        }
        NdArray& p = *params[pi];
        const size_t ei = static_cast<size_t>(flat);
        const float orig = p.data[ei];

        p.data[ei] = orig + step;
        const double fp = f();
        p.data[ei] = orig - step;
        const double fm = f();
        p.data[ei] = orig;

        const double fd = (fp - fm) / (2.0 * double(step));
        const double ad = p.has_grad() ? double(p.grad[ei]) : 0.0;
        const double rel = std::abs(ad - fd) / (std::abs(fd) + 1e-8);
        worst = std::max(worst, rel);
    }
    return worst;
}

}  // namespace mmdc
