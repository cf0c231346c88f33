#ifndef DFN_SERIALIZE_HPP_
#define DFN_SERIALIZE_HPP_

#include <cstdint>
#include <cstring>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

#include "dfn/errors.hpp"
#include "dfn/tensor.hpp"

// On-disk tensor format ("DFNT"), little-endian:
//   magic "DFNT" | u8 version=1 | u8 dtype (0=f32, 1=f64) | u8 rank |
//   u32 dims[rank] | raw values
// The same byte-level helpers back the dataset ("DFND") and checkpoint
// ("DFNC") containers.

namespace dfn::io {

// Stream wrappers that track the running byte offset so format errors can
// report where parsing failed.

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  std::uint64_t offset() const { return offset_; }

  void read_exact(void* dst, std::size_t n, const char* what) {
    in_.read(static_cast<char*>(dst), std::streamsize(n));
    if (std::size_t(in_.gcount()) != n)
      throw FormatError(std::string("truncated file while reading ") + what,
                        offset_);
    offset_ += n;
  }

  std::uint8_t read_u8(const char* what) {
    std::uint8_t v;
    read_exact(&v, 1, what);
    return v;
  }

  std::uint32_t read_u32(const char* what) {
    std::uint8_t b[4];
    read_exact(b, 4, what);
    return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 |
           std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
  }

  std::uint64_t read_u64(const char* what) {
    std::uint8_t b[8];
    read_exact(b, 8, what);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }

  std::string read_string(std::uint32_t len, const char* what) {
    std::string s(len, '\0');
    if (len) read_exact(s.data(), len, what);
    return s;
  }

  void expect_magic(const char magic[4]) {
    const std::uint64_t at = offset_;
    char buf[4];
    read_exact(buf, 4, "magic");
    if (std::memcmp(buf, magic, 4) != 0)
      throw FormatError("bad magic, expected \"" + std::string(magic, 4) +
                            "\" got \"" + std::string(buf, 4) + "\"",
                        at);
  }

 private:
  std::istream& in_;
  std::uint64_t offset_ = 0;
};

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}

  void write_exact(const void* src, std::size_t n) {
    out_.write(static_cast<const char*>(src), std::streamsize(n));
  }

  void write_u8(std::uint8_t v) { write_exact(&v, 1); }

  void write_u32(std::uint32_t v) {
    std::uint8_t b[4] = {std::uint8_t(v), std::uint8_t(v >> 8),
                         std::uint8_t(v >> 16), std::uint8_t(v >> 24)};
    write_exact(b, 4);
  }

  void write_u64(std::uint64_t v) {
    std::uint8_t b[8];
    for (int i = 0; i < 8; ++i) b[i] = std::uint8_t(v >> (8 * i));
    write_exact(b, 8);
  }

  void write_string(const std::string& s) { write_exact(s.data(), s.size()); }

 private:
  std::ostream& out_;
};

}  // namespace dfn::io

namespace dfn {

// Canonical key=value block shared by the checkpoint and dataset containers:
// sorted keys, one "key=value\n" per line.
inline std::string kv_to_block(const std::map<std::string, std::string>& kv) {
  std::string out;
  for (const auto& [k, v] : kv) {
    out += k;
    out += '=';
    out += v;
    out += '\n';
  }
  return out;
}

inline std::map<std::string, std::string> kv_from_block(
    const std::string& block, std::uint64_t offset_base = 0) {
  std::map<std::string, std::string> kv;
  std::size_t pos = 0;
  while (pos < block.size()) {
    std::size_t eol = block.find('\n', pos);
    if (eol == std::string::npos)
      throw FormatError("config block line without newline", offset_base + pos);
    std::size_t eq = block.find('=', pos);
    if (eq == std::string::npos || eq > eol)
      throw FormatError("config block line without '='", offset_base + pos);
    kv.emplace(block.substr(pos, eq - pos), block.substr(eq + 1, eol - eq - 1));
    pos = eol + 1;
  }
  return kv;
}

inline constexpr std::uint8_t kTensorFormatVersion = 1;

template <typename T>
constexpr std::uint8_t dtype_code() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "tensors are f32 or f64");
  return std::is_same_v<T, float> ? 0 : 1;
}

template <typename T>
void write_tensor(io::Writer& w, const Tensor<T>& t) {
  w.write_exact("DFNT", 4);
  w.write_u8(kTensorFormatVersion);
  w.write_u8(dtype_code<T>());
  w.write_u8(std::uint8_t(t.rank()));
  for (int i = 0; i < t.rank(); ++i) w.write_u32(std::uint32_t(t.dim(i)));
  // Values are stored as raw IEEE-754 in native byte order; the project
  // targets little-endian hosts and all multi-byte integers above are
  // explicitly little-endian.
  w.write_exact(t.ptr(), std::size_t(t.numel()) * sizeof(T));
}

template <typename T>
void write_tensor(std::ostream& out, const Tensor<T>& t) {
  io::Writer w(out);
  write_tensor(w, t);
}

template <typename T>
Tensor<T> read_tensor(io::Reader& r) {
  r.expect_magic("DFNT");
  const std::uint64_t at_version = r.offset();
  const std::uint8_t version = r.read_u8("tensor version");
  if (version != kTensorFormatVersion)
    throw FormatError("unsupported tensor version " + std::to_string(version),
                      at_version);
  const std::uint64_t at_dtype = r.offset();
  const std::uint8_t dtype = r.read_u8("tensor dtype");
  if (dtype != dtype_code<T>())
    throw FormatError("tensor dtype " + std::to_string(dtype) +
                          " does not match requested element type",
                      at_dtype);
  const std::uint8_t rank = r.read_u8("tensor rank");
  Shape shape(rank);
  for (auto& d : shape) d = int(r.read_u32("tensor dim"));
  const std::int64_t n = shape_numel(shape);
  std::vector<T> values(static_cast<std::size_t>(n));
  if (n) r.read_exact(values.data(), std::size_t(n) * sizeof(T), "tensor data");
  return Tensor<T>(std::move(shape), std::move(values));
}

template <typename T>
Tensor<T> read_tensor(std::istream& in) {
  io::Reader r(in);
  return read_tensor<T>(r);
}

}  // namespace dfn

#endif  // DFN_SERIALIZE_HPP_
