#pragma once

// MNIST IDX and CIFAR-10 binary readers, batching, and gathering.
// Files may be gzip-compressed; zlib reads plain files transparently.

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "odgq/random.hpp"
#include "odgq/tensor.hpp"

namespace odgq {

template <class T>
struct Dataset {
  Tensor<T> images;  // [N,C,H,W], values in [0,1]
  std::vector<int> labels;
  std::string name;
  std::string split;
  std::size_t classes = 10;

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const { return {images.dim(1), images.dim(2), images.dim(3)}; }
};

/// Whole file contents, gunzipped when compressed.
inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  if (!std::filesystem::exists(path)) throw IoError("file not found: " + path);
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw IoError("cannot open " + path);
  std::vector<std::uint8_t> out;
  std::array<std::uint8_t, 1 << 16> buf{};
  for (;;) {
    const int n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()));
    if (n < 0) {
      int code = 0;
      const std::string msg = gzerror(f, &code);
      gzclose(f);
      throw IoError("read error in " + path + ": " + msg);
    }
    if (n == 0) break;
    out.insert(out.end(), buf.begin(), buf.begin() + n);
  }
  gzclose(f);
  return out;
}

namespace detail {

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

inline std::string hex32(std::uint32_t v) {
  std::ostringstream os;
  os << "0x" << std::hex << std::setfill('0') << std::setw(8) << v;
  return os.str();
}

}  // namespace detail

/// Parses IDX image/label buffers (big-endian header, unsigned-byte payload).
template <class T = float>
Dataset<T> parse_mnist(const std::vector<std::uint8_t>& img, const std::vector<std::uint8_t>& lab) {
  if (img.size() < 16) throw FormatError("IDX image file truncated: " + std::to_string(img.size()) + " bytes, header needs 16");
  if (const std::uint32_t m = detail::read_be32(img, 0); m != 0x00000803) {
    throw FormatError("bad IDX image magic " + detail::hex32(m) + " (expected 0x00000803)");
  }
  const std::size_t n = detail::read_be32(img, 4), rows = detail::read_be32(img, 8), cols = detail::read_be32(img, 12);
  if (rows != 28 || cols != 28) {
    throw FormatError("IDX image dimensions " + std::to_string(rows) + "x" + std::to_string(cols) + " are not 28x28");
  }
  if (n == 0) throw FormatError("IDX image file declares zero images");
  const std::size_t expected = 16 + n * rows * cols;
  if (img.size() != expected) {
    throw FormatError("IDX image payload size mismatch: header implies " + std::to_string(expected) + " bytes, file has " +
                      std::to_string(img.size()));
  }
  if (lab.size() < 8) throw FormatError("IDX label file truncated: " + std::to_string(lab.size()) + " bytes, header needs 8");
  if (const std::uint32_t m = detail::read_be32(lab, 0); m != 0x00000801) {
    throw FormatError("bad IDX label magic " + detail::hex32(m) + " (expected 0x00000801)");
  }
  const std::size_t nl = detail::read_be32(lab, 4);
  if (lab.size() != 8 + nl) {
    throw FormatError("IDX label payload size mismatch: header implies " + std::to_string(8 + nl) + " bytes, file has " +
                      std::to_string(lab.size()));
  }
  if (nl != n) throw FormatError("image/label count mismatch: " + std::to_string(n) + " images, " + std::to_string(nl) + " labels");

  Dataset<T> ds;
  ds.name = "mnist";
  ds.images = Tensor<T>({n, 1, rows, cols});
  for (std::size_t i = 0; i < n * rows * cols; ++i) ds.images[i] = static_cast<T>(img[16 + i]) / T(255);
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t l = lab[8 + i];
    if (l > 9) throw FormatError("label " + std::to_string(l) + " at byte offset " + std::to_string(8 + i) + " exceeds 9");
    ds.labels[i] = l;
  }
  return ds;
}

template <class T = float>
Dataset<T> load_mnist(const std::string& images_path, const std::string& labels_path) {
  return parse_mnist<T>(read_file_bytes(images_path), read_file_bytes(labels_path));
}

inline constexpr std::size_t kCifarRecord = 3073;

/// Concatenated CIFAR-10 binary batches: records of 1 label byte followed by
/// 1024 R, 1024 G and 1024 B bytes.
template <class T = float>
Dataset<T> parse_cifar10(const std::vector<std::vector<std::uint8_t>>& files) {
  std::size_t total = 0;
  for (std::size_t f = 0; f < files.size(); ++f) {
    if (files[f].empty() || files[f].size() % kCifarRecord != 0) {
      const std::size_t whole = files[f].size() / kCifarRecord * kCifarRecord;
      throw FormatError("CIFAR-10 file " + std::to_string(f) + " truncated: size " + std::to_string(files[f].size()) +
                        " is not a positive multiple of 3073 (partial record at byte offset " + std::to_string(whole) + ")");
    }
    total += files[f].size() / kCifarRecord;
  }
  if (total == 0) throw FormatError("no CIFAR-10 records");
  Dataset<T> ds;
  ds.name = "cifar10";
  ds.images = Tensor<T>({total, 3, 32, 32});
  ds.labels.resize(total);
  std::size_t idx = 0;
  for (std::size_t f = 0; f < files.size(); ++f) {
    const auto& b = files[f];
    for (std::size_t off = 0; off < b.size(); off += kCifarRecord, ++idx) {
      if (b[off] > 9) {
        throw FormatError("CIFAR-10 label byte " + std::to_string(b[off]) + " > 9 in file " + std::to_string(f) +
                          " at byte offset " + std::to_string(off));
      }
      ds.labels[idx] = b[off];
      T* dst = ds.images.raw() + idx * 3072;
      for (std::size_t i = 0; i < 3072; ++i) dst[i] = static_cast<T>(b[off + 1 + i]) / T(255);
    }
  }
  return ds;
}

template <class T = float>
Dataset<T> load_cifar10(const std::vector<std::string>& paths) {
  if (paths.empty()) throw ConfigError("no CIFAR-10 batch files given");
  std::vector<std::vector<std::uint8_t>> files;
  for (const auto& p : paths) files.push_back(read_file_bytes(p));
  return parse_cifar10<T>(files);
}

/// First n samples (n = 0 keeps everything).
template <class T>
Dataset<T> take(const Dataset<T>& ds, std::size_t n) {
  if (n == 0 || n >= ds.size()) return ds;
  Dataset<T> out = ds;
  out.images = slice_leading(ds.images, 0, n);
  out.labels.assign(ds.labels.begin(), ds.labels.begin() + static_cast<std::ptrdiff_t>(n));
  return out;
}

/// Index lists for one epoch: ceil(N/B) batches, the last possibly partial.
/// With shuffling, the permutation is derived from (seed, epoch).
inline std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch, std::uint64_t seed, bool shuffle,
                                                     std::uint64_t epoch = 0) {
  if (batch == 0) throw ConfigError("batch size must be at least 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle) {
    Rng rng(derive_seed(seed, 0xba7c0000ULL + epoch));
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch)));
  }
  return out;
}

template <class T>
std::pair<Tensor<T>, std::vector<int>> gather(const Dataset<T>& ds, const std::vector<std::size_t>& idx) {
  const Shape s = ds.sample_shape();
  const std::size_t per = numel(s);
  Tensor<T> x({idx.size(), s[0], s[1], s[2]});
  std::vector<int> y(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= ds.size()) throw ShapeError("sample index " + std::to_string(idx[i]) + " out of range");
    std::copy_n(ds.images.raw() + idx[i] * per, per, x.raw() + i * per);
    y[i] = ds.labels[idx[i]];
  }
  return {std::move(x), std::move(y)};
}

/// Pad-4 random crop plus horizontal flip, in place.
template <class T>
void augment_pad_crop_flip(Tensor<T>& x, Rng& rng) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  std::uniform_int_distribution<int> shift(-4, 4);
  std::bernoulli_distribution flip(0.5);
  std::vector<T> tmp(C * H * W);
  for (std::size_t b = 0; b < B; ++b) {
    T* img = x.raw() + b * C * H * W;
    const int dy = shift(rng), dx = shift(rng);
    const bool f = flip(rng);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xx = 0; xx < W; ++xx) {
          const int sy = static_cast<int>(y) + dy;
          const int sxr = static_cast<int>(f ? W - 1 - xx : xx) + dx;
          tmp[(c * H + y) * W + xx] = (sy < 0 || sy >= static_cast<int>(H) || sxr < 0 || sxr >= static_cast<int>(W))
                                          ? T(0)
                                          : img[(c * H + static_cast<std::size_t>(sy)) * W + static_cast<std::size_t>(sxr)];
        }
    std::copy(tmp.begin(), tmp.end(), img);
  }
}

}  // namespace odgq
