#include "crna/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "crna/error.hpp"

namespace crna::io {

namespace {

template <typename T>
void write_pod(std::ofstream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& is, const std::string& what) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("checkpoint: short read in " + what);
  return v;
}

void write_string(std::ofstream& os, const std::string& s) {
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::ifstream& is, const std::string& what) {
  auto len = read_pod<std::uint32_t>(is, what);
  std::string s(len, '\0');
  is.read(s.data(), static_cast<std::streamsize>(len));
  if (!is) throw IoError("checkpoint: short read in " + what);
  return s;
}

}  // namespace

void save_container(const std::filesystem::path& path, const Container& c) {
  if (c.magic.size() != 4) throw ConfigError("checkpoint: magic must be 4 bytes");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os.write(c.magic.data(), 4);
  write_pod<std::uint32_t>(os, c.version);
  write_pod<std::uint64_t>(os, c.config_hash);
  write_string(os, c.meta_json);
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(c.arrays.size()));
  for (const auto& a : c.arrays) {
    write_string(os, a.name);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(a.shape.size()));
    for (std::size_t d : a.shape) {
      write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(d));
    }
    if (a.data.size() != shape_numel(a.shape)) {
      throw ShapeError("checkpoint: array '" + a.name + "' size mismatch");
    }
    os.write(reinterpret_cast<const char*>(a.data.data()),
             static_cast<std::streamsize>(a.data.size() * sizeof(float)));
  }
  if (!os) throw IoError("write failure on " + path.string());
}

Container load_container(const std::filesystem::path& path,
                         const std::string& expected_magic) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  Container c;
  char magic[4];
  is.read(magic, 4);
  if (!is) throw IoError("checkpoint: file too short: " + path.string());
  c.magic.assign(magic, 4);
  if (!expected_magic.empty() && c.magic != expected_magic) {
    throw IoError("checkpoint: bad magic '" + c.magic + "' in " +
                  path.string() + " (expected '" + expected_magic + "')");
  }
  c.version = read_pod<std::uint32_t>(is, "version");
  if (c.version != 1) {
    throw IoError("checkpoint: unsupported version " +
                  std::to_string(c.version));
  }
  c.config_hash = read_pod<std::uint64_t>(is, "config hash");
  c.meta_json = read_string(is, "metadata");
  auto count = read_pod<std::uint32_t>(is, "array count");
  c.arrays.resize(count);
  for (auto& a : c.arrays) {
    a.name = read_string(is, "array name");
    auto ndim = read_pod<std::uint32_t>(is, "array rank");
    a.shape.resize(ndim);
    for (auto& d : a.shape) {
      d = static_cast<std::size_t>(read_pod<std::uint64_t>(is, "array dim"));
    }
    a.data.resize(shape_numel(a.shape));
    is.read(reinterpret_cast<char*>(a.data.data()),
            static_cast<std::streamsize>(a.data.size() * sizeof(float)));
    if (!is) throw IoError("checkpoint: short array data in " + path.string());
  }
  return c;
}

NamedArray to_f32(const std::string& name, const Tensor& t) {
  NamedArray a;
  a.name = name;
  a.shape = t.shape();
  a.data.resize(t.numel());
  for (std::size_t i = 0; i < t.numel(); ++i) {
    a.data[i] = static_cast<float>(t[i]);
  }
  return a;
}

Tensor to_tensor(const NamedArray& a) {
  Tensor t(a.shape);
  for (std::size_t i = 0; i < t.numel(); ++i) {
    t[i] = static_cast<double>(a.data[i]);
  }
  return t;
}

}  // namespace crna::io
