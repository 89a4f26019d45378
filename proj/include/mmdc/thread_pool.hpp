#pragma once

#include <cstdint>
#include <functional>

namespace mmdc {

// Process-wide worker pool for data-parallel kernels. Work is split into
// one contiguous chunk per worker; every output element is written by
// exactly one thread, so results do not depend on the thread count.
namespace pool {

// 0 = hardware concurrency (clamped to 8). Safe to call repeatedly.
void set_threads(int n);
int threads();

// fn(begin, end) over [0, n), chunked per worker. Runs inline when the
// pool has one thread or n is small.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn);

}  // namespace pool
}  // namespace mmdc
