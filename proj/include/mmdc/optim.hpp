#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mmdc/ndarray.hpp"

namespace mmdc {

struct AdamWConfig {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.01f;
};

// Decoupled-weight-decay Adam over externally owned parameters. Moment
// buffers shape-match their parameters; the step counter only advances.
class AdamW {
public:
    AdamW(std::vector<std::pair<std::string, NdArray*>> params, AdamWConfig cfg);

    // One update from the grads currently in the parameters. Throws
    // NumericError naming the first parameter with no grad.
    void step();
    void zero_grad();
    int64_t steps_taken() const { return t_; }
    const AdamWConfig& config() const { return cfg_; }

private:
    struct Slot {
        std::string name;
        NdArray* p;
        std::vector<float> m, v;
    };
    std::vector<Slot> slots_;
    AdamWConfig cfg_;
    int64_t t_ = 0;
};

// Max over sampled coordinates of |grad - central_diff| / (|central_diff| + 1e-8).
// `f` is re-evaluated with single coordinates of `params` perturbed in place
// (data restored afterwards); the engine gradient must already sit in each
// param's grad slot. Two baseline evaluations guard against nondeterministic f.
double finite_diff_check(const std::function<double()>& f, std::vector<NdArray*> params,
                         int n_coords, float step, uint64_t seed);

}  // namespace mmdc
