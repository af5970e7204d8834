#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "diffmap/autograd.hpp"

namespace diffmap::io {

namespace fs = std::filesystem;

template <class T>
T byteswap_value(T v) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
  std::memcpy(&v, bytes, sizeof(T));
  return v;
}

// Raw little-endian payload I/O. Reading checks the exact byte count.
template <class T>
void write_le(const fs::path& file, std::span<const T> values);
template <class T>
std::vector<T> read_le(const fs::path& file, std::size_t expected_count);

// Parameter blob: concatenation of all tensors in list order as float64 LE.
void save_params(const fs::path& file, const ag::ParamList& params);
// Fills parameter values in place; throws FormatError on size mismatch.
void load_params(const fs::path& file, const ag::ParamList& params);

// Adam state blob: first moments then second moments, list order.
void save_moments(const fs::path& file, const std::vector<Tensor>& m, const std::vector<Tensor>& v);
void load_moments(const fs::path& file, const ag::ParamList& params, std::vector<Tensor>& m, std::vector<Tensor>& v);

// FNV-1a 64-bit over file bytes, used for content hashes in run manifests.
std::uint64_t fnv1a_file(const fs::path& file, std::uint64_t seed = 14695981039346656037ULL);
std::uint64_t fnv1a_tree(const fs::path& dir);
std::string hex64(std::uint64_t v);

std::string read_text(const fs::path& file);
void write_text(const fs::path& file, const std::string& text);

}  // namespace diffmap::io
