#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>

namespace masqlab {

// Minimal SHA-256 (FIPS 180-4). Used for config hashes, artifact
// manifests, and the frozen-base-weights invariant.
class Sha256 {
public:
    Sha256() { reset(); }

    void reset();
    void update(const void* data, std::size_t len);
    // finalizes; the object must be reset() before reuse
    std::array<std::uint8_t, 32> digest();
    std::string hex_digest();

private:
    void process_block(const std::uint8_t* block);

    std::uint32_t h_[8];
    std::uint64_t total_len_ = 0;
    std::uint8_t buffer_[64];
    std::size_t buffer_len_ = 0;
};

std::string sha256_hex(const void* data, std::size_t len);
std::string sha256_hex(const std::string& s);
std::string sha256_file_hex(const std::string& path);

}  // namespace masqlab
