#pragma once

#include <algorithm>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include <zlib.h>

#include "disentangle/tensor.hpp"

namespace disentangle::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

enum class FormatErrorCode { io, magic, version, dtype, truncated, checksum, missing };

inline const char* to_string(FormatErrorCode c) {
  switch (c) {
    case FormatErrorCode::io: return "io";
    case FormatErrorCode::magic: return "magic";
    case FormatErrorCode::version: return "version";
    case FormatErrorCode::dtype: return "dtype";
    case FormatErrorCode::truncated: return "truncated";
    case FormatErrorCode::checksum: return "checksum";
    case FormatErrorCode::missing: return "missing";
  }
  return "unknown";
}

class FormatError : public std::runtime_error {
 public:
  FormatError(FormatErrorCode code, const std::string& what)
      : std::runtime_error(std::string(io::to_string(code)) + " error: " + what), code_(code) {}
  FormatErrorCode code() const { return code_; }

 private:
  FormatErrorCode code_;
};

inline std::uint32_t crc32(const std::uint8_t* data, std::size_t size) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  while (size > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = ::crc32(crc, data, chunk);
    data += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  template <class T>
  void put(T v) {
    bytes(&v, sizeof(T));
  }
  void text(std::string_view s) { bytes(s.data(), s.size()); }
  std::vector<std::uint8_t>& buffer() { return buf_; }

  /// Appends CRC-32 of everything written so far.
  void seal() { put<std::uint32_t>(crc32(buf_.data(), buf_.size())); }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

  void bytes(void* out, std::size_t n) {
    if (n > size_ - pos_) throw FormatError(FormatErrorCode::truncated, "unexpected end of data");
    std::memcpy(out, data_ + pos_, n);
    pos_ += n;
  }
  template <class T>
  T get() {
    T v;
    bytes(&v, sizeof(T));
    return v;
  }
  std::string text(std::size_t n) {
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  std::size_t remaining() const { return size_ - pos_; }

 private:
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrorCode::io, "cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

/// Writes via a temporary file and rename, so readers never see a partial file.
inline void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError(FormatErrorCode::io, "cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw FormatError(FormatErrorCode::io, "write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw FormatError(FormatErrorCode::io, "rename to " + path.string() + " failed: " + ec.message());
}

/// Checks the trailing CRC-32 and returns the payload size.
inline std::size_t verify_crc(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4) throw FormatError(FormatErrorCode::truncated, "file shorter than its checksum");
  const std::size_t payload = bytes.size() - 4;
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + payload, 4);
  if (stored != crc32(bytes.data(), payload)) throw FormatError(FormatErrorCode::checksum, "CRC-32 mismatch");
  return payload;
}

// ---------------------------------------------------------------------------
// Named-array container (checkpoints, synthetic-corpus specs)

enum class DType : std::uint8_t { f32 = 1, f64 = 2, u64 = 3, u8 = 4 };

inline std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::u64: return 8;
    case DType::u8: return 1;
  }
  throw FormatError(FormatErrorCode::dtype, "unknown dtype code " + std::to_string(int(d)));
}

template <class T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::f32;
  else if constexpr (std::is_same_v<T, double>) return DType::f64;
  else if constexpr (std::is_same_v<T, std::uint64_t>) return DType::u64;
  else {
    static_assert(std::is_same_v<T, std::uint8_t>, "unsupported element type");
    return DType::u8;
  }
}

struct NamedArray {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::vector<std::uint8_t> raw;
};

/// An ordered set of named, typed arrays with a file format:
///
///   magic(4) | u32 version | u64 config hash | u32 count |
///   count x { u32 name length | name | u8 dtype | u32 rank | rank x u64 dim | raw values } |
///   u32 CRC-32 of everything before it
class Archive {
 public:
  std::uint64_t config_hash = 0;

  template <class T>
  void put(const std::string& name, const Shape& shape, const std::vector<T>& values) {
    if (numel(shape) != values.size()) throw ShapeError("archive entry '" + name + "' shape/value mismatch");
    NamedArray a{name, dtype_of<T>(), shape, {}};
    a.raw.resize(values.size() * sizeof(T));
    if (!values.empty()) std::memcpy(a.raw.data(), values.data(), a.raw.size());
    erase(name);
    arrays_.push_back(std::move(a));
  }

  template <class T>
  void put(const std::string& name, const Tensor<T>& t) {
    put(name, t.shape, t.values);
  }

  void put_text(const std::string& name, std::string_view text) {
    std::vector<std::uint8_t> v(text.begin(), text.end());
    if (v.empty()) v.push_back(0);  // shapes cannot be empty
    put(name, Shape{v.size()}, v);
  }

  void put_u64(const std::string& name, std::uint64_t v) { put(name, Shape{1}, std::vector<std::uint64_t>{v}); }

  bool contains(const std::string& name) const { return find(name) != nullptr; }

  template <class T>
  std::vector<T> get_values(const std::string& name) const {
    const NamedArray& a = require(name);
    if (a.dtype != dtype_of<T>()) {
      throw FormatError(FormatErrorCode::dtype, "entry '" + name + "' has dtype code " + std::to_string(int(a.dtype)));
    }
    std::vector<T> out(a.raw.size() / sizeof(T));
    if (!out.empty()) std::memcpy(out.data(), a.raw.data(), a.raw.size());
    return out;
  }

  template <class T>
  Tensor<T> get_tensor(const std::string& name) const {
    return Tensor<T>(require(name).shape, get_values<T>(name));
  }

  std::string get_text(const std::string& name) const {
    const auto v = get_values<std::uint8_t>(name);
    std::string s(v.begin(), v.end());
    if (s.size() == 1 && s[0] == '\0') s.clear();
    return s;
  }

  std::uint64_t get_u64(const std::string& name) const {
    const auto v = get_values<std::uint64_t>(name);
    if (v.size() != 1) throw FormatError(FormatErrorCode::dtype, "entry '" + name + "' is not a scalar");
    return v[0];
  }

  const std::vector<NamedArray>& arrays() const { return arrays_; }

  std::vector<std::uint8_t> serialize(std::string_view magic, std::uint32_t version) const {
    if (magic.size() != 4) throw std::invalid_argument("archive magic must be 4 bytes");
    ByteWriter w;
    w.text(magic);
    w.put<std::uint32_t>(version);
    w.put<std::uint64_t>(config_hash);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(arrays_.size()));
    for (const auto& a : arrays_) {
      w.put<std::uint32_t>(static_cast<std::uint32_t>(a.name.size()));
      w.text(a.name);
      w.put<std::uint8_t>(static_cast<std::uint8_t>(a.dtype));
      w.put<std::uint32_t>(static_cast<std::uint32_t>(a.shape.size()));
      for (const std::size_t d : a.shape) w.put<std::uint64_t>(d);
      w.bytes(a.raw.data(), a.raw.size());
    }
    w.seal();
    return std::move(w.buffer());
  }

  /// Parses a complete buffer. Nothing is returned unless every check passes.
  static Archive parse(const std::vector<std::uint8_t>& bytes, std::string_view magic, std::uint32_t version) {
    if (bytes.size() >= 4 && std::memcmp(bytes.data(), magic.data(), 4) != 0) {
      throw FormatError(FormatErrorCode::magic, "expected magic '" + std::string(magic) + "'");
    }
    const std::size_t payload = verify_crc(bytes);
    ByteReader r(bytes.data(), payload);
    r.text(4);
    const auto got_version = r.get<std::uint32_t>();
    if (got_version != version) {
      throw FormatError(FormatErrorCode::version,
                        "format version " + std::to_string(got_version) + ", expected " + std::to_string(version));
    }
    Archive out;
    out.config_hash = r.get<std::uint64_t>();
    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
      NamedArray a;
      a.name = r.text(r.get<std::uint32_t>());
      a.dtype = static_cast<DType>(r.get<std::uint8_t>());
      const std::size_t width = dtype_size(a.dtype);
      const auto rank = r.get<std::uint32_t>();
      for (std::uint32_t k = 0; k < rank; ++k) a.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
      const std::size_t n = numel(a.shape) * width;
      if (n > r.remaining()) throw FormatError(FormatErrorCode::truncated, "entry '" + a.name + "' runs past the end");
      a.raw.resize(n);
      r.bytes(a.raw.data(), n);
      out.arrays_.push_back(std::move(a));
    }
    if (r.remaining() != 0) throw FormatError(FormatErrorCode::truncated, "trailing bytes after last entry");
    return out;
  }

  void save(const std::filesystem::path& path, std::string_view magic, std::uint32_t version) const {
    write_file_atomic(path, serialize(magic, version));
  }

  static Archive load(const std::filesystem::path& path, std::string_view magic, std::uint32_t version) {
    return parse(read_file(path), magic, version);
  }

  void erase(const std::string& name) {
    std::erase_if(arrays_, [&](const NamedArray& a) { return a.name == name; });
  }

 private:
  const NamedArray* find(const std::string& name) const {
    for (const auto& a : arrays_) {
      if (a.name == name) return &a;
    }
    return nullptr;
  }
  const NamedArray& require(const std::string& name) const {
    if (const NamedArray* a = find(name)) return *a;
    throw FormatError(FormatErrorCode::missing, "no entry named '" + name + "'");
  }

  std::vector<NamedArray> arrays_;
};

// ---------------------------------------------------------------------------
// Feature files: "FTRM" | u8 version | u32 T | u32 F | u8 dtype (1 = f32) | T*F values | u32 CRC-32

inline constexpr std::uint8_t kFeatureVersion = 1;

inline std::vector<std::uint8_t> encode_features(const Tensor<float>& x) {
  if (x.rank() != 2) throw ShapeError("feature matrix must be [T, F], got " + disentangle::to_string(x.shape));
  ByteWriter w;
  w.text("FTRM");
  w.put<std::uint8_t>(kFeatureVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(x.dim(0)));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(x.dim(1)));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(DType::f32));
  w.bytes(x.data(), x.size() * sizeof(float));
  w.seal();
  return std::move(w.buffer());
}

inline Tensor<float> decode_features(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "FTRM", 4) != 0) {
    throw FormatError(FormatErrorCode::magic, "not a feature file (expected 'FTRM')");
  }
  ByteReader header(bytes.data(), bytes.size());
  header.text(4);
  const auto version = header.get<std::uint8_t>();
  if (version != kFeatureVersion) {
    throw FormatError(FormatErrorCode::version, "feature file version " + std::to_string(version));
  }
  const auto frames = header.get<std::uint32_t>();
  const auto dims = header.get<std::uint32_t>();
  const auto dtype = header.get<std::uint8_t>();
  if (dtype != static_cast<std::uint8_t>(DType::f32)) {
    throw FormatError(FormatErrorCode::dtype, "feature dtype code " + std::to_string(dtype) + " (only 1 = f32)");
  }
  const std::size_t expected = 14 + std::size_t{frames} * dims * sizeof(float) + 4;
  if (bytes.size() < expected) {
    throw FormatError(FormatErrorCode::truncated, "feature payload has " + std::to_string(bytes.size()) +
                                                      " bytes, header implies " + std::to_string(expected));
  }
  if (bytes.size() > expected) throw FormatError(FormatErrorCode::truncated, "trailing bytes after feature payload");
  verify_crc(bytes);
  if (frames == 0 || dims == 0) throw FormatError(FormatErrorCode::truncated, "empty feature matrix");
  Tensor<float> x(Shape{frames, dims});
  std::memcpy(x.data(), bytes.data() + 14, x.size() * sizeof(float));
  return x;
}

inline void write_feature_file(const std::filesystem::path& path, const Tensor<float>& x) {
  write_file_atomic(path, encode_features(x));
}

inline Tensor<float> load_feature_file(const std::filesystem::path& path) { return decode_features(read_file(path)); }

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 1469598103934665603ull;
  for (const unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace disentangle::io
