#include "mmdc/kernels.hpp"

#include <cstdlib>
#include <string>

namespace mmdc::kern {

namespace {

const Ops* pick_initial() {
    if (const char* env = std::getenv("MMDC_KERNELS")) {
        const std::string want = env;
        if (want == "scalar") return &scalar_ops();
        if (want == "avx2" && have_avx2()) return &avx2_ops();
    }
    return have_avx2() ? &avx2_ops() : &scalar_ops();
}

const Ops*& active_slot() {
    static const Ops* active = pick_initial();
    return active;
}

}  // namespace

const Ops& ops() { return *active_slot(); }

bool set_active(std::string_view name) {
    if (name == "scalar") {
        active_slot() = &scalar_ops();
        return true;
    }
    if (name == "avx2") {
        if (!have_avx2()) return false;
        active_slot() = &avx2_ops();
        return true;
    }
    return false;
}

const char* active_name() { return ops().name; }

}  // namespace mmdc::kern
