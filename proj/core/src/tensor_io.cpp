// SPDX-License-Identifier: Apache-2.0
#include "csn/tensor_io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace csn {

namespace le {

void put_u32(std::ostream& os, std::uint32_t v) {
  std::array<char, 4> b{};
  for (int i = 0; i < 4; ++i) b[i] = char((v >> (8 * i)) & 0xff);
  os.write(b.data(), 4);
}

std::uint32_t get_u32(std::istream& is) {
  std::array<unsigned char, 4> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 4)) throw LoadError("unexpected end of file");
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
         (std::uint32_t(b[3]) << 24);
}

void put_u8(std::ostream& os, std::uint8_t v) { os.put(char(v)); }

std::uint8_t get_u8(std::istream& is) {
  char c = 0;
  if (!is.get(c)) throw LoadError("unexpected end of file");
  return std::uint8_t(c);
}

namespace {

void put_u64(std::ostream& os, std::uint64_t v) {
  std::array<char, 8> b{};
  for (int i = 0; i < 8; ++i) b[i] = char((v >> (8 * i)) & 0xff);
  os.write(b.data(), 8);
}

std::uint64_t get_u64(std::istream& is) {
  std::array<unsigned char, 8> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 8)) throw LoadError("unexpected end of file");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

}  // namespace

}  // namespace le

namespace csnt {

void write(std::ostream& os, const Tensor& t, std::uint8_t version) {
  if (version != kVersionF32 && version != kVersionF64) {
    throw UsageError("CSNT: unsupported version " + std::to_string(version));
  }
  if (t.rank() > 255) throw DimensionError("CSNT: rank above 255");
  os.write("CSNT", 4);
  le::put_u8(os, version);
  le::put_u8(os, std::uint8_t(t.rank()));
  for (auto d : t.shape()) le::put_u32(os, std::uint32_t(d));
  for (double v : t.data()) {
    if (version == kVersionF32) {
      le::put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    } else {
      le::put_u64(os, std::bit_cast<std::uint64_t>(v));
    }
  }
  if (!os) throw Error("CSNT: write failed");
}

Tensor read(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4)) throw LoadError("CSNT: truncated header");
  if (std::memcmp(magic.data(), "CSNT", 4) != 0) throw LoadError("CSNT: bad magic");
  const auto version = le::get_u8(is);
  if (version != kVersionF32 && version != kVersionF64) {
    throw LoadError("CSNT: unsupported version " + std::to_string(version) + " (expected 1 or 2)");
  }
  const auto rank = le::get_u8(is);
  if (rank == 0) throw LoadError("CSNT: rank 0");
  Shape shape(rank);
  for (auto& d : shape) {
    d = le::get_u32(is);
    if (d == 0) throw LoadError("CSNT: zero dimension");
  }
  std::vector<double> data(shape_size(shape));
  try {
    for (auto& v : data) {
      if (version == kVersionF32) {
        v = static_cast<double>(std::bit_cast<float>(le::get_u32(is)));
      } else {
        v = std::bit_cast<double>(le::get_u64(is));
      }
    }
  } catch (const LoadError&) {
    throw LoadError("CSNT: truncated payload for shape " + shape_str(shape));
  }
  return Tensor(std::move(shape), std::move(data));
}

void save(const std::filesystem::path& path, const Tensor& t, std::uint8_t version) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  write(os, t, version);
}

Tensor load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("cannot open " + path.string());
  return read(is);
}

}  // namespace csnt

}  // namespace csn
