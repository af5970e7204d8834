#include "diffmap/checkpoint.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "diffmap/errors.hpp"

namespace diffmap::io {

template <class T>
void write_le(const fs::path& file, std::span<const T> values) {
  std::ofstream os(file, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open " + file.string() + " for writing");
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
  } else {
    for (T v : values) {
      const T s = byteswap_value(v);
      os.write(reinterpret_cast<const char*>(&s), sizeof(T));
    }
  }
  if (!os) throw FormatError("failed writing " + file.string());
}

template <class T>
std::vector<T> read_le(const fs::path& file, std::size_t expected_count) {
  std::ifstream is(file, std::ios::binary | std::ios::ate);
  if (!is) throw FormatError("missing payload " + file.filename().string());
  const auto bytes = static_cast<std::size_t>(is.tellg());
  if (bytes != expected_count * sizeof(T)) {
    throw FormatError("payload " + file.filename().string() + " has " + std::to_string(bytes) + " bytes, expected " +
                      std::to_string(expected_count * sizeof(T)));
  }
  is.seekg(0);
  std::vector<T> out(expected_count);
  is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(bytes));
  if constexpr (std::endian::native != std::endian::little) {
    for (auto& v : out) v = byteswap_value(v);
  }
  return out;
}

template void write_le<double>(const fs::path&, std::span<const double>);
template void write_le<float>(const fs::path&, std::span<const float>);
template void write_le<std::uint8_t>(const fs::path&, std::span<const std::uint8_t>);
template void write_le<std::uint16_t>(const fs::path&, std::span<const std::uint16_t>);
template std::vector<double> read_le<double>(const fs::path&, std::size_t);
template std::vector<float> read_le<float>(const fs::path&, std::size_t);
template std::vector<std::uint8_t> read_le<std::uint8_t>(const fs::path&, std::size_t);
template std::vector<std::uint16_t> read_le<std::uint16_t>(const fs::path&, std::size_t);

void save_params(const fs::path& file, const ag::ParamList& params) {
  std::vector<double> flat;
  flat.reserve(ag::param_count(params));
  for (const auto& [name, p] : params) {
    (void)name;
    flat.insert(flat.end(), p.value().storage().begin(), p.value().storage().end());
  }
  write_le<double>(file, flat);
}

void load_params(const fs::path& file, const ag::ParamList& params) {
  const auto flat = read_le<double>(file, ag::param_count(params));
  std::size_t offset = 0;
  for (const auto& [name, p] : params) {
    (void)name;
    auto& dst = p.node()->value.storage();
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(offset),
              flat.begin() + static_cast<std::ptrdiff_t>(offset + dst.size()), dst.begin());
    offset += dst.size();
  }
}

void save_moments(const fs::path& file, const std::vector<Tensor>& m, const std::vector<Tensor>& v) {
  std::vector<double> flat;
  for (const auto* set : {&m, &v})
    for (const auto& t : *set) flat.insert(flat.end(), t.storage().begin(), t.storage().end());
  write_le<double>(file, flat);
}

void load_moments(const fs::path& file, const ag::ParamList& params, std::vector<Tensor>& m, std::vector<Tensor>& v) {
  const std::size_t count = ag::param_count(params);
  const auto flat = read_le<double>(file, 2 * count);
  m.clear();
  v.clear();
  std::size_t offset = 0;
  for (auto* set : {&m, &v}) {
    for (const auto& [name, p] : params) {
      (void)name;
      const std::size_t n = p.value().numel();
      set->emplace_back(p.shape(), std::vector<double>(flat.begin() + static_cast<std::ptrdiff_t>(offset),
                                                       flat.begin() + static_cast<std::ptrdiff_t>(offset + n)));
      offset += n;
    }
  }
}

std::uint64_t fnv1a_file(const fs::path& file, std::uint64_t seed) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw FormatError("cannot hash " + file.string());
  std::uint64_t h = seed;
  char buf[1 << 14];
  while (is) {
    is.read(buf, sizeof(buf));
    for (std::streamsize i = 0; i < is.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ULL;
    }
  }
  return h;
}

std::uint64_t fnv1a_tree(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file()) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::uint64_t h = 14695981039346656037ULL;
  for (const auto& f : files) {
    for (char c : fs::relative(f, dir).generic_string()) {
      h ^= static_cast<unsigned char>(c);
      h *= 1099511628211ULL;
    }
    h = fnv1a_file(f, h);
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

std::string read_text(const fs::path& file) {
  std::ifstream is(file);
  if (!is) throw FormatError("cannot read " + file.string());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

void write_text(const fs::path& file, const std::string& text) {
  std::ofstream os(file, std::ios::trunc);
  if (!os) throw FormatError("cannot write " + file.string());
  os << text;
}

}  // namespace diffmap::io
