#pragma once

#include <array>
#include <cstdint>
#include <cstddef>
#include <string>

namespace mmdc {

// Incremental SHA-256 (FIPS 180-4).
class Sha256 {
public:
    Sha256() { reset(); }

    void reset();
    void update(const void* data, size_t len);
    std::array<uint8_t, 32> digest();  // finalizes; further update() needs reset()

    static std::string hex(const void* data, size_t len);

private:
    void process_block(const uint8_t* p);

    std::array<uint32_t, 8> h_;
    uint8_t buf_[64];
    size_t buf_len_ = 0;
    uint64_t total_ = 0;
};

std::string to_hex(const std::array<uint8_t, 32>& d);

}  // namespace mmdc
