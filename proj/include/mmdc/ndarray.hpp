#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmdc/util.hpp"

namespace mmdc {

// Dense float32 tensor, row-major. grad is empty until requested and,
// when present, always matches data in length.
struct NdArray {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;  // empty == absent

    NdArray() = default;
    explicit NdArray(Shape s, float fill = 0.0f)
        : shape(std::move(s)), data(static_cast<size_t>(numel(shape)), fill) {}

    static NdArray zeros(Shape s) { return NdArray(std::move(s)); }
    static NdArray scalar(float v) {
        NdArray a(Shape{1});
        a.data[0] = v;
        return a;
    }

    int64_t size() const { return static_cast<int64_t>(data.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(shape.size()); }

    bool has_grad() const { return !grad.empty(); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
    }
    void zero_grad() {
        if (has_grad()) std::fill(grad.begin(), grad.end(), 0.0f);
    }
    void drop_grad() { grad.clear(); }

    float& at(std::initializer_list<int> idx);
    float at(std::initializer_list<int> idx) const;
};

inline bool same_shape(const NdArray& a, const NdArray& b) { return a.shape == b.shape; }

// Throws NumericError naming `what` if any element is NaN/Inf.
void check_finite(const NdArray& a, const char* what);
bool bitwise_equal(const NdArray& a, const NdArray& b);

}  // namespace mmdc
