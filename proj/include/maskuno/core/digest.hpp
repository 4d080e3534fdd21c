// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>

namespace maskuno::core {

/// Incremental SHA-256, hex output.
class Digest {
 public:
  Digest();
  ~Digest();
  Digest(const Digest&) = delete;
  Digest& operator=(const Digest&) = delete;

  Digest& update(std::span<const std::byte> bytes);
  Digest& update(std::string_view text);
  template <class T>
  Digest& update_values(std::span<const T> values) {
    return update(std::as_bytes(values));
  }

  std::string hex();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

std::string sha256_hex(std::string_view bytes);
std::string file_digest(const std::filesystem::path& path);

}  // namespace maskuno::core
