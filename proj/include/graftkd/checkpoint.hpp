#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "graftkd/tensor.hpp"

namespace graftkd {

// Named tensor archive (.tns): magic "GKTNS001", u32 entry count, then per
// entry u16 name length, name bytes, u8 dtype (0=f32, 1=f64), u64 rows,
// u64 cols, raw little-endian payload. Round-trips are bit-exact.
namespace detail {

template <typename V>
void ar_write(std::ofstream& f, V v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(V));
}
template <typename V>
V ar_read(std::ifstream& f) {
  V v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(V));
  return v;
}

template <typename T>
constexpr std::uint8_t dtype_tag() {
  if constexpr (std::is_same_v<T, float>) return 0;
  else return 1;
}

}  // namespace detail

template <typename T>
void save_tensor_archive(const std::string& path,
                         const std::vector<std::pair<std::string, const MatrixX<T>*>>& entries) {
  std::ofstream f(path, std::ios::binary);
  require(f.good(), "archive: cannot open for write: " + path);
  f.write("GKTNS001", 8);
  detail::ar_write<std::uint32_t>(f, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, m] : entries) {
    detail::ar_write<std::uint16_t>(f, static_cast<std::uint16_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::ar_write<std::uint8_t>(f, detail::dtype_tag<T>());
    detail::ar_write<std::uint64_t>(f, static_cast<std::uint64_t>(m->rows()));
    detail::ar_write<std::uint64_t>(f, static_cast<std::uint64_t>(m->cols()));
    f.write(reinterpret_cast<const char*>(m->data()),
            static_cast<std::streamsize>(sizeof(T) * static_cast<size_t>(m->size())));
  }
  require(f.good(), "archive: write failed: " + path);
}

template <typename T>
std::map<std::string, MatrixX<T>> load_tensor_archive(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), "archive: cannot open: " + path);
  char magic[8];
  f.read(magic, 8);
  require(std::string(magic, 8) == "GKTNS001", "archive: bad magic in " + path);
  const auto count = detail::ar_read<std::uint32_t>(f);
  std::map<std::string, MatrixX<T>> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = detail::ar_read<std::uint16_t>(f);
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    const auto tag = detail::ar_read<std::uint8_t>(f);
    require(tag == detail::dtype_tag<T>(),
            strf("archive: dtype mismatch for '%s' in %s", name.c_str(), path.c_str()));
    const auto rows = detail::ar_read<std::uint64_t>(f);
    const auto cols = detail::ar_read<std::uint64_t>(f);
    MatrixX<T> m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    f.read(reinterpret_cast<char*>(m.data()),
           static_cast<std::streamsize>(sizeof(T) * static_cast<size_t>(m.size())));
    out.emplace(std::move(name), std::move(m));
  }
  require(f.good(), "archive: truncated: " + path);
  return out;
}

// Saves any object exposing visit_state(prefix, fn).
template <typename T, typename Obj>
void save_state(const std::string& path, Obj& obj, const std::string& prefix) {
  std::vector<std::pair<std::string, const MatrixX<T>*>> entries;
  obj.visit_state(prefix, [&](const std::string& name, MatrixX<T>& m) {
    entries.emplace_back(name, &m);
  });
  save_tensor_archive<T>(path, entries);
}

// Loads into an existing structurally-matching object; every visited tensor
// must be present with identical shape, and no archive entry may be left over.
template <typename T, typename Obj>
void load_state(const std::string& path, Obj& obj, const std::string& prefix) {
  auto archive = load_tensor_archive<T>(path);
  size_t used = 0;
  obj.visit_state(prefix, [&](const std::string& name, MatrixX<T>& m) {
    auto it = archive.find(name);
    if (it == archive.end()) fail("archive: missing tensor '" + name + "' in " + path);
    require(it->second.rows() == m.rows() && it->second.cols() == m.cols(),
            strf("archive: shape mismatch for '%s': %ldx%ld vs %ldx%ld", name.c_str(),
                 static_cast<long>(it->second.rows()), static_cast<long>(it->second.cols()),
                 static_cast<long>(m.rows()), static_cast<long>(m.cols())));
    m = it->second;
    ++used;
  });
  require(used == archive.size(),
          strf("archive: %zu of %zu tensors consumed from %s (structure mismatch)", used,
               archive.size(), path.c_str()));
}

// Byte-exact snapshot of an object's full state (params + buffers), for
// freezing checks.
template <typename T, typename Obj>
std::vector<std::pair<std::string, MatrixX<T>>> snapshot_state(Obj& obj,
                                                               const std::string& prefix) {
  std::vector<std::pair<std::string, MatrixX<T>>> out;
  obj.visit_state(prefix, [&](const std::string& name, MatrixX<T>& m) {
    out.emplace_back(name, m);
  });
  return out;
}

template <typename T>
bool snapshots_bitwise_equal(const std::vector<std::pair<std::string, MatrixX<T>>>& a,
                             const std::vector<std::pair<std::string, MatrixX<T>>>& b,
                             std::string* first_diff = nullptr) {
  if (a.size() != b.size()) {
    if (first_diff) *first_diff = "entry count differs";
    return false;
  }
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i].first != b[i].first || a[i].second.rows() != b[i].second.rows() ||
        a[i].second.cols() != b[i].second.cols()) {
      if (first_diff) *first_diff = "structure differs at " + a[i].first;
      return false;
    }
    if (std::memcmp(a[i].second.data(), b[i].second.data(),
                    sizeof(T) * static_cast<size_t>(a[i].second.size())) != 0) {
      if (first_diff) *first_diff = a[i].first;
      return false;
    }
  }
  return true;
}

}  // namespace graftkd
