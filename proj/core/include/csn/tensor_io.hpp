// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>

#include "csn/tensor.hpp"

namespace csn {

/// Malformed or unreadable file.
class LoadError : public Error {
 public:
  using Error::Error;
};

/// CSNT tensor format:
///   "CSNT" | u8 version | u8 rank | u32le dims[rank] | values (little-endian)
/// Version 1 stores f32 values, version 2 stores f64 values. Both load into
/// double precision.
namespace csnt {

constexpr std::uint8_t kVersionF32 = 1;
constexpr std::uint8_t kVersionF64 = 2;

void write(std::ostream& os, const Tensor& t, std::uint8_t version = kVersionF32);
Tensor read(std::istream& is);

void save(const std::filesystem::path& path, const Tensor& t,
          std::uint8_t version = kVersionF32);
Tensor load(const std::filesystem::path& path);

}  // namespace csnt

// Little-endian helpers shared by the file formats.
namespace le {

void put_u32(std::ostream& os, std::uint32_t v);
std::uint32_t get_u32(std::istream& is);
void put_u8(std::ostream& os, std::uint8_t v);
std::uint8_t get_u8(std::istream& is);

}  // namespace le

}  // namespace csn
