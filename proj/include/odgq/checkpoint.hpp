#pragma once

// Binary checkpoint: "ODGQ" magic, u32 version, u32-length-prefixed config
// text, u32 tensor count, then per tensor: u32-length name, u8 dtype
// (1 = f32, 2 = f64), u32 rank, u64 dims, raw values. All little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "odgq/model.hpp"
#include "odgq/tensor.hpp"

namespace odgq {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

struct CheckpointTensor {
  std::string name;
  DType dtype = DType::f32;
  Tensor<double> values;  // f32 values widen exactly
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::string config_text;
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

/// 64-bit FNV-1a, used as the config fingerprint.
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  const std::vector<std::uint8_t>& bytes() const { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& b) : b_(b) {}
  std::uint8_t u8() {
    need(1, "u8");
    return b_[pos_++];
  }
  std::uint32_t u32() {
    need(4, "u32");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{b_[pos_++]} << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8, "u64");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{b_[pos_++]} << (8 * i);
    return v;
  }
  std::string str(const char* what) {
    const std::uint32_t n = u32();
    need(n, what);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (b_.size() - pos_ < n) {
      throw FormatError("checkpoint truncated reading " + std::string(what) + " at byte offset " + std::to_string(pos_));
    }
  }
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> serialize(const Checkpoint& ck) {
  detail::ByteWriter w;
  for (char c : std::string("ODGQ")) w.u8(static_cast<std::uint8_t>(c));
  w.u32(ck.version);
  w.str(ck.config_text);
  w.u32(static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& t : ck.tensors) {
    w.str(t.name);
    w.u8(static_cast<std::uint8_t>(t.dtype));
    w.u32(static_cast<std::uint32_t>(t.values.rank()));
    for (std::size_t d : t.values.shape()) w.u64(d);
    for (double v : t.values.data()) {
      if (t.dtype == DType::f32) {
        w.f32(static_cast<float>(v));
      } else {
        w.f64(v);
      }
    }
  }
  return w.bytes();
}

inline Checkpoint deserialize(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes);
  std::string magic;
  for (int i = 0; i < 4; ++i) magic.push_back(static_cast<char>(r.u8()));
  if (magic != "ODGQ") throw FormatError("not a checkpoint: bad magic");
  Checkpoint ck;
  ck.version = r.u32();
  if (ck.version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(ck.version));
  }
  ck.config_text = r.str("config text");
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    t.name = r.str("tensor name");
    const std::uint8_t code = r.u8();
    if (code != 1 && code != 2) throw FormatError("tensor '" + t.name + "' has unknown dtype code " + std::to_string(code));
    t.dtype = static_cast<DType>(code);
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw FormatError("tensor '" + t.name + "' has implausible rank " + std::to_string(rank));
    Shape shape(rank);
    std::size_t n = 1;
    const std::size_t width = t.dtype == DType::f32 ? 4 : 8;
    for (auto& d : shape) {
      const std::uint64_t v = r.u64();
      if (v == 0 || v > r.remaining()) throw FormatError("tensor '" + t.name + "' has invalid extent " + std::to_string(v));
      d = static_cast<std::size_t>(v);
      n *= d;
      if (n > r.remaining() / width) throw FormatError("checkpoint truncated in tensor '" + t.name + "'");
    }
    t.values = Tensor<double>(shape);
    for (double& v : t.values.data()) v = t.dtype == DType::f32 ? static_cast<double>(r.f32()) : r.f64();
    ck.tensors.push_back(std::move(t));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after checkpoint at offset " + std::to_string(r.pos()));
  return ck;
}

inline void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for " + path);
}

inline std::vector<std::uint8_t> read_raw_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) { write_bytes(path, serialize(ck)); }
inline Checkpoint load_checkpoint(const std::string& path) { return deserialize(read_raw_bytes(path)); }

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

template <class T>
Checkpoint make_checkpoint(const Parameters<T>& params, std::string config_text) {
  Checkpoint ck;
  ck.config_text = std::move(config_text);
  for (const auto& [name, t] : params.tensors) ck.tensors.push_back({name, dtype_of<T>(), t.template cast<double>()});
  return ck;
}

/// Parameters for `model` from a checkpoint; shapes and names must match.
template <class T>
Parameters<T> parameters_from(const Checkpoint& ck, const Model& model) {
  Parameters<T> ref = init_parameters<T>(model, 0);
  Parameters<T> p;
  p.trainable = ref.trainable;
  for (const auto& t : ck.tensors) p.tensors.emplace(t.name, t.values.template cast<T>());
  check_parameters(model, p);
  return p;
}

/// key=value lines with '#' comments, in file order.
inline std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

}  // namespace odgq
