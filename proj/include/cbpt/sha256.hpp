#pragma once

#include <cstdint>
#include <string>

namespace cbpt {

// Minimal SHA-256, used for parameter digests and run-cell seeding.
class Sha256 {
 public:
  Sha256();
  void update(const void* data, std::size_t len);
  void update(const std::string& s) { update(s.data(), s.size()); }
  // Finalizes and returns the lowercase hex digest; the object is spent.
  std::string hex_digest();

 private:
  void process_block(const std::uint8_t* block);

  std::uint32_t h_[8];
  std::uint8_t buffer_[64];
  std::size_t buffer_len_ = 0;
  std::uint64_t total_bits_ = 0;
  bool finalized_ = false;
};

std::string sha256_hex(const void* data, std::size_t len);
std::string sha256_hex(const std::string& s);

// First 8 digest bytes as a little-endian integer; used to derive
// independent per-cell seeds from (global seed, attack, defense).
std::uint64_t seed_from_strings(std::uint64_t global_seed, const std::string& a, const std::string& b);

}  // namespace cbpt
