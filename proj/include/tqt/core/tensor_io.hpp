// Copyright 2026 The TQT Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Tensor file format, little-endian throughout:
//   "TQT1" | dtype u8 | rank u8 | dims u32[rank] | raw elements
// dtype 0 = float64, 1 = int32.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <variant>

#include "tqt/core/tensor.hpp"

namespace tqt {

enum class DType : std::uint8_t { kFloat64 = 0, kInt32 = 1 };

namespace detail {

template <typename U>
void put_le(std::ostream& os, U v) {
  std::array<char, sizeof(U)> buf{};
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  }
  os.write(buf.data(), buf.size());
}

template <typename U>
U get_le(std::istream& is) {
  std::array<unsigned char, sizeof(U)> buf{};
  is.read(reinterpret_cast<char*>(buf.data()), buf.size());
  if (!is) throw IoError("tensor file truncated");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  return v;
}

template <typename T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, double>) {
    return DType::kFloat64;
  } else {
    static_assert(std::is_same_v<T, std::int32_t>, "unsupported tensor dtype");
    return DType::kInt32;
  }
}

}  // namespace detail

template <typename T>
void write_tensor(std::ostream& os, const BasicTensor<T>& t) {
  os.write("TQT1", 4);
  os.put(static_cast<char>(detail::dtype_of<T>()));
  if (t.rank() > 255) throw IoError("tensor rank exceeds 255");
  os.put(static_cast<char>(t.rank()));
  for (auto d : t.shape()) detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  for (T v : t.data()) {
    if constexpr (std::is_same_v<T, double>) {
      detail::put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
    } else {
      detail::put_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(v));
    }
  }
}

using AnyTensor = std::variant<Tensor, IntTensor>;

inline AnyTensor read_any_tensor(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "TQT1", 4) != 0) throw IoError("bad tensor magic");
  const int dtype = is.get();
  const int rank = is.get();
  if (!is) throw IoError("tensor header truncated");
  Shape shape(static_cast<std::size_t>(rank));
  for (auto& d : shape) d = detail::get_le<std::uint32_t>(is);
  const std::size_t n = shape_numel(shape);
  if (dtype == static_cast<int>(DType::kFloat64)) {
    std::vector<double> elems(n);
    for (auto& v : elems) v = std::bit_cast<double>(detail::get_le<std::uint64_t>(is));
    return Tensor(std::move(shape), std::move(elems));
  }
  if (dtype == static_cast<int>(DType::kInt32)) {
    std::vector<std::int32_t> elems(n);
    for (auto& v : elems) v = std::bit_cast<std::int32_t>(detail::get_le<std::uint32_t>(is));
    return IntTensor(std::move(shape), std::move(elems));
  }
  throw IoError("unknown tensor dtype code " + std::to_string(dtype));
}

template <typename T>
BasicTensor<T> read_tensor(std::istream& is) {
  auto any = read_any_tensor(is);
  if (auto* t = std::get_if<BasicTensor<T>>(&any)) return std::move(*t);
  throw IoError("tensor file has unexpected dtype");
}

template <typename T>
void save_tensor(const std::filesystem::path& path, const BasicTensor<T>& t) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  write_tensor(os, t);
}

template <typename T>
BasicTensor<T> load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  return read_tensor<T>(is);
}

}  // namespace tqt
