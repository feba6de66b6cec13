#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ehmam/params.hpp"

namespace ehmam {

enum class DType : std::uint8_t { kF32 = 0, kF64 = 1, kI64 = 2, kU8 = 3 };

// Versioned binary container of named arrays with shape headers.
//
// Layout (little endian):
//   "EHCK" u32 version u32 count
//   count x { u32 name_len, name, u8 dtype, u32 ndim, i64 dims[ndim],
//             u64 nbytes, payload }
class Container {
 public:
  struct Entry {
    std::string name;
    DType dtype = DType::kF32;
    std::vector<std::int64_t> shape;
    std::vector<unsigned char> bytes;
  };

  static constexpr std::uint32_t kVersion = 1;

  void put_f32(const std::string& name, const std::vector<std::int64_t>& shape, const std::vector<float>& v);
  void put_f64(const std::string& name, const std::vector<std::int64_t>& shape, const std::vector<double>& v);
  void put_i64(const std::string& name, const std::vector<std::int64_t>& v);
  void put_string(const std::string& name, const std::string& s);

  const Entry& get(const std::string& name) const;
  bool has(const std::string& name) const;
  std::vector<float> get_f32(const std::string& name) const;
  std::vector<double> get_f64(const std::string& name) const;
  std::vector<std::int64_t> get_i64(const std::string& name) const;
  std::string get_string(const std::string& name) const;

  const std::vector<Entry>& entries() const { return entries_; }

  // Writes to a sibling temp file and renames over `path`.
  void save(const std::filesystem::path& path) const;
  static Container load(const std::filesystem::path& path);

 private:
  void put(Entry e);
  std::vector<Entry> entries_;
};

// Stores each parameter as "<prefix>/<name>".
void put_params(Container& c, const std::string& prefix, const ParamSet<float>& ps);
// Fills `ps` (which fixes the expected layout); shape mismatches throw ContractError.
void get_params(const Container& c, const std::string& prefix, ParamSet<float>& ps);

}  // namespace ehmam
