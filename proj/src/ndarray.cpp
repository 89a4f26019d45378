#include "mmdc/ndarray.hpp"

#include <cstring>

#include "mmdc/kernels.hpp"

namespace mmdc {

namespace {
size_t flat_index(const Shape& shape, std::initializer_list<int> idx) {
    if (idx.size() != shape.size())
        throw ShapeError("index rank " + std::to_string(idx.size()) + " vs shape " + shape_str(shape));
    size_t flat = 0;
    size_t d = 0;
    for (int i : idx) {
        if (i < 0 || i >= shape[d]) throw ShapeError("index out of range for " + shape_str(shape));
        flat = flat * static_cast<size_t>(shape[d]) + static_cast<size_t>(i);
        ++d;
    }
    return flat;
}
}  // namespace

float& NdArray::at(std::initializer_list<int> idx) { return data[flat_index(shape, idx)]; }
float NdArray::at(std::initializer_list<int> idx) const { return data[flat_index(shape, idx)]; }

void check_finite(const NdArray& a, const char* what) {
    if (!kern::ops().all_finite(a.data.data(), a.size()))
        throw NumericError(std::string("non-finite values in ") + what);
}

bool bitwise_equal(const NdArray& a, const NdArray& b) {
    if (a.shape != b.shape) return false;
    if (a.data.empty()) return b.data.empty();
    return std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0;
}

}  // namespace mmdc
