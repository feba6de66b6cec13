#include "ehmam/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "ehmam/errors.hpp"

namespace ehmam {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[4] = {'E', 'H', 'C', 'K'};

std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::kF32: return 4;
    case DType::kF64: return 8;
    case DType::kI64: return 8;
    case DType::kU8: return 1;
  }
  return 0;
}

template <typename T>
std::vector<unsigned char> to_bytes(const std::vector<T>& v) {
  std::vector<unsigned char> b(v.size() * sizeof(T));
  if (!v.empty()) std::memcpy(b.data(), v.data(), b.size());
  return b;
}

template <typename T>
std::vector<T> from_bytes(const Container::Entry& e, DType want) {
  if (e.dtype != want) throw ContractError("checkpoint: entry " + e.name + " has unexpected dtype");
  std::vector<T> v(e.bytes.size() / sizeof(T));
  if (!v.empty()) std::memcpy(v.data(), e.bytes.data(), e.bytes.size());
  return v;
}

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const fs::path& path) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("checkpoint: truncated file", path.string());
  return v;
}

}  // namespace

void Container::put(Entry e) {
  for (auto& x : entries_) {
    if (x.name == e.name) {
      x = std::move(e);
      return;
    }
  }
  entries_.push_back(std::move(e));
}

void Container::put_f32(const std::string& name, const std::vector<std::int64_t>& shape, const std::vector<float>& v) {
  put({name, DType::kF32, shape, to_bytes(v)});
}
void Container::put_f64(const std::string& name, const std::vector<std::int64_t>& shape, const std::vector<double>& v) {
  put({name, DType::kF64, shape, to_bytes(v)});
}
void Container::put_i64(const std::string& name, const std::vector<std::int64_t>& v) {
  put({name, DType::kI64, {static_cast<std::int64_t>(v.size())}, to_bytes(v)});
}
void Container::put_string(const std::string& name, const std::string& s) {
  put({name, DType::kU8, {static_cast<std::int64_t>(s.size())}, std::vector<unsigned char>(s.begin(), s.end())});
}

bool Container::has(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return true;
  }
  return false;
}

const Container::Entry& Container::get(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e;
  }
  throw ContractError("checkpoint: missing entry " + name);
}

std::vector<float> Container::get_f32(const std::string& name) const { return from_bytes<float>(get(name), DType::kF32); }
std::vector<double> Container::get_f64(const std::string& name) const {
  return from_bytes<double>(get(name), DType::kF64);
}
std::vector<std::int64_t> Container::get_i64(const std::string& name) const {
  return from_bytes<std::int64_t>(get(name), DType::kI64);
}
std::string Container::get_string(const std::string& name) const {
  const auto& e = get(name);
  if (e.dtype != DType::kU8) throw ContractError("checkpoint: entry " + name + " is not a byte string");
  return {e.bytes.begin(), e.bytes.end()};
}

void Container::save(const fs::path& path) const {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw IoError("checkpoint: cannot write", tmp.string());
    os.write(kMagic, 4);
    write_pod(os, kVersion);
    write_pod(os, static_cast<std::uint32_t>(entries_.size()));
    for (const auto& e : entries_) {
      write_pod(os, static_cast<std::uint32_t>(e.name.size()));
      os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
      write_pod(os, static_cast<std::uint8_t>(e.dtype));
      write_pod(os, static_cast<std::uint32_t>(e.shape.size()));
      for (auto d : e.shape) write_pod(os, d);
      write_pod(os, static_cast<std::uint64_t>(e.bytes.size()));
      os.write(reinterpret_cast<const char*>(e.bytes.data()), static_cast<std::streamsize>(e.bytes.size()));
    }
    if (!os) throw IoError("checkpoint: write failed", tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("checkpoint: rename failed (" + ec.message() + ")", path.string());
}

Container Container::load(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open", path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) throw IoError("checkpoint: bad magic", path.string());
  const auto version = read_pod<std::uint32_t>(is, path);
  if (version != kVersion) {
    throw IoError("checkpoint: unsupported version " + std::to_string(version), path.string());
  }
  const auto count = read_pod<std::uint32_t>(is, path);
  Container c;
  for (std::uint32_t k = 0; k < count; ++k) {
    Entry e;
    const auto name_len = read_pod<std::uint32_t>(is, path);
    e.name.resize(name_len);
    is.read(e.name.data(), name_len);
    const auto dt = read_pod<std::uint8_t>(is, path);
    if (dt > 3) throw IoError("checkpoint: unknown dtype", path.string());
    e.dtype = static_cast<DType>(dt);
    const auto ndim = read_pod<std::uint32_t>(is, path);
    std::uint64_t elems = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      e.shape.push_back(read_pod<std::int64_t>(is, path));
      elems *= static_cast<std::uint64_t>(e.shape.back());
    }
    const auto nbytes = read_pod<std::uint64_t>(is, path);
    if (nbytes != elems * dtype_size(e.dtype)) throw IoError("checkpoint: size/shape mismatch for " + e.name, path.string());
    e.bytes.resize(nbytes);
    is.read(reinterpret_cast<char*>(e.bytes.data()), static_cast<std::streamsize>(nbytes));
    if (!is) throw IoError("checkpoint: truncated payload", path.string());
    c.entries_.push_back(std::move(e));
  }
  return c;
}

void put_params(Container& c, const std::string& prefix, const ParamSet<float>& ps) {
  for (const auto& p : ps) {
    std::vector<std::int64_t> shape(p.shape.begin(), p.shape.end());
    c.put_f32(prefix + "/" + p.name, shape, std::vector<float>(p.data.begin(), p.data.end()));
  }
}

void get_params(const Container& c, const std::string& prefix, ParamSet<float>& ps) {
  for (auto& p : ps) {
    const std::string key = prefix + "/" + p.name;
    if (!c.has(key)) throw ContractError("checkpoint: missing parameter " + key);
    const auto& e = c.get(key);
    const std::vector<std::int64_t> want(p.shape.begin(), p.shape.end());
    if (e.shape != want) throw ContractError("checkpoint: incompatible shape for " + key);
    const auto v = c.get_f32(key);
    p.data.assign(v.begin(), v.end());
  }
}

}  // namespace ehmam
