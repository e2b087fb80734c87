#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <zlib.h>

#include "tprop/errors.hpp"
#include "tprop/linalg.hpp"
#include "tprop/rng.hpp"

namespace tprop {

enum class Split : std::uint8_t { train, valid, test };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  return "?";
}

/// Samples stored one per row (n x d, values in [0, 1]) with class ids and a
/// split tag per sample. Regression sets fill `targets` (n x k) instead of
/// labels.
struct Dataset {
  Matrix inputs;
  std::vector<int> labels;
  std::vector<Split> splits;
  Matrix targets;
  int num_classes = 0;

  std::size_t size() const noexcept { return inputs.rows(); }
  std::size_t dim() const noexcept { return inputs.cols(); }

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < splits.size(); ++i) {
      if (splits[i] == s) idx.push_back(i);
    }
    return idx;
  }
};

/// A gathered mini-batch, column-stacked.
struct Batch {
  Matrix x;                 // d x B
  Matrix y;                 // classes x B one-hot (or k x B regression targets)
  std::vector<int> labels;  // empty for regression
};

inline Batch gather_batch(const Dataset& ds, std::span<const std::size_t> idx) {
  Batch b;
  const std::size_t B = idx.size();
  b.x = Matrix(ds.dim(), B);
  for (std::size_t j = 0; j < B; ++j) {
    const auto row = ds.inputs.row(idx[j]);
    for (std::size_t r = 0; r < row.size(); ++r) b.x(r, j) = row[r];
  }
  if (!ds.targets.empty()) {
    b.y = Matrix(ds.targets.cols(), B);
    for (std::size_t j = 0; j < B; ++j) {
      const auto row = ds.targets.row(idx[j]);
      for (std::size_t r = 0; r < row.size(); ++r) b.y(r, j) = row[r];
    }
  } else {
    b.y = Matrix(static_cast<std::size_t>(ds.num_classes), B);
    b.labels.resize(B);
    for (std::size_t j = 0; j < B; ++j) {
      b.labels[j] = ds.labels[idx[j]];
      b.y(static_cast<std::size_t>(b.labels[j]), j) = 1.0;
    }
  }
  return b;
}

/// One epoch's mini-batches: a permutation of `idx` drawn from `rng`, cut
/// into chunks of `batch`; the final partial chunk is kept.
inline std::vector<std::vector<std::size_t>> shuffled_batches(std::vector<std::size_t> idx, std::size_t batch,
                                                              Rng& rng) {
  if (batch < 1) throw ParameterError("shuffled_batches: batch must be >= 1");
  for (std::size_t i = idx.size(); i > 1; --i) {  // Fisher-Yates
    std::swap(idx[i - 1], idx[rng.uniform_index(i)]);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < idx.size(); start += batch) {
    const std::size_t end = std::min(idx.size(), start + batch);
    out.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(start), idx.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

namespace detail {

/// Whole-file read through zlib, which passes uncompressed files through.
inline std::vector<std::uint8_t> read_maybe_gzip(const std::filesystem::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (f == nullptr) throw DataError("cannot open " + path.string());
  std::vector<std::uint8_t> out;
  std::array<std::uint8_t, 1 << 16> buf{};
  for (;;) {
    const int n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()));
    if (n < 0) {
      gzclose(f);
      throw DataError("read error in " + path.string());
    }
    if (n == 0) break;
    out.insert(out.end(), buf.begin(), buf.begin() + n);
  }
  gzclose(f);
  return out;
}

inline std::filesystem::path find_file(const std::filesystem::path& dir, const std::string& name) {
  for (const std::string& candidate : {name, name + ".gz"}) {
    const auto p = dir / candidate;
    if (std::filesystem::exists(p)) return p;
  }
  // Some distributions use '.' instead of '-' before "idx".
  std::string dotted = name;
  if (const auto pos = dotted.find("-idx"); pos != std::string::npos) dotted[pos] = '.';
  for (const std::string& candidate : {dotted, dotted + ".gz"}) {
    const auto p = dir / candidate;
    if (std::filesystem::exists(p)) return p;
  }
  throw DataError("missing file " + (dir / name).string());
}

inline std::uint32_t read_be32(std::span<const std::uint8_t> b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

struct IdxFile {
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> bytes;  // whole file; payload starts at `offset`
  std::size_t offset = 0;
};

/// Parses an unsigned-byte IDX file: two zero bytes, type byte 0x08, the
/// number of dimensions, big-endian 32-bit sizes, then raw bytes.
inline IdxFile read_idx(const std::filesystem::path& path, std::uint32_t expected_magic) {
  IdxFile f;
  f.bytes = read_maybe_gzip(path);
  if (f.bytes.size() < 4) throw DataError("truncated header in " + path.string());
  const std::uint32_t magic = read_be32(f.bytes, 0);
  if (magic != expected_magic) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "bad magic 0x%08x (expected 0x%08x) in ", magic, expected_magic);
    throw DataError(buf + path.string());
  }
  const std::size_t ndim = f.bytes[3];
  if (f.bytes.size() < 4 + 4 * ndim) throw DataError("truncated header in " + path.string());
  std::size_t count = 1;
  for (std::size_t i = 0; i < ndim; ++i) {
    f.dims.push_back(read_be32(f.bytes, 4 + 4 * i));
    count *= f.dims.back();
  }
  f.offset = 4 + 4 * ndim;
  if (f.bytes.size() < f.offset + count) {
    throw DataError("truncated payload in " + path.string() + ": expected " + std::to_string(count) + " bytes, found " +
                    std::to_string(f.bytes.size() - f.offset));
  }
  return f;
}

inline void append_images(Dataset& ds, std::vector<double>& data, std::size_t& dim, const IdxFile& images,
                          const IdxFile& labels, const std::string& what) {
  if (images.dims.size() != 3 || labels.dims.size() != 1) throw DataError("unexpected IDX rank in " + what);
  const std::size_t n = images.dims[0];
  const std::size_t d = std::size_t{images.dims[1]} * images.dims[2];
  if (labels.dims[0] != n) throw DataError("image/label count mismatch in " + what);
  if (dim != 0 && dim != d) throw DataError("image size mismatch in " + what);
  dim = d;
  data.reserve(data.size() + n * d);
  for (std::size_t i = 0; i < n * d; ++i) data.push_back(images.bytes[images.offset + i] / 255.0);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = labels.bytes[labels.offset + i];
    if (label >= ds.num_classes) throw DataError("label out of range in " + what);
    ds.labels.push_back(label);
  }
}

/// Tags the last `min(holdout, n / 6)` training samples as validation.
inline void tag_train_valid(Dataset& ds, std::size_t n_train, std::size_t holdout) {
  const std::size_t valid = std::min(holdout, n_train / 6);
  ds.splits.assign(n_train, Split::train);
  std::fill(ds.splits.end() - static_cast<std::ptrdiff_t>(valid), ds.splits.end(), Split::valid);
}

}  // namespace detail

/// MNIST from the four standard IDX files (optionally gzip-compressed).
/// Pixels are scaled by 1/255. The last 10 000 training images (or n/6 for a
/// truncated file) are tagged as validation.
inline Dataset load_mnist(const std::filesystem::path& dir, std::size_t valid_holdout = 10000) {
  namespace d = detail;
  const auto train_img = d::read_idx(d::find_file(dir, "train-images-idx3-ubyte"), 0x00000803);
  const auto train_lbl = d::read_idx(d::find_file(dir, "train-labels-idx1-ubyte"), 0x00000801);
  const auto test_img = d::read_idx(d::find_file(dir, "t10k-images-idx3-ubyte"), 0x00000803);
  const auto test_lbl = d::read_idx(d::find_file(dir, "t10k-labels-idx1-ubyte"), 0x00000801);
  Dataset ds;
  ds.num_classes = 10;
  std::vector<double> data;
  std::size_t dim = 0;
  d::append_images(ds, data, dim, train_img, train_lbl, "MNIST train files in " + dir.string());
  const std::size_t n_train = ds.labels.size();
  d::append_images(ds, data, dim, test_img, test_lbl, "MNIST test files in " + dir.string());
  ds.inputs = Matrix(ds.labels.size(), dim, std::move(data));
  d::tag_train_valid(ds, n_train, valid_holdout);
  ds.splits.resize(ds.size(), Split::test);
  return ds;
}

/// CIFAR-10 binary batches: 3073-byte records (label byte + 3072 pixels).
/// The last 1000 training records (or n/6) are tagged as validation.
inline Dataset load_cifar10(const std::filesystem::path& dir, std::size_t valid_holdout = 1000) {
  constexpr std::size_t kRecord = 3073;
  Dataset ds;
  ds.num_classes = 10;
  std::vector<double> data;
  auto read_batch = [&](const std::string& name) {
    const auto path = detail::find_file(dir, name);
    const auto bytes = detail::read_maybe_gzip(path);
    if (bytes.empty() || bytes.size() % kRecord != 0) {
      throw DataError("truncated payload in " + path.string() + ": size " + std::to_string(bytes.size()) +
                      " is not a multiple of 3073");
    }
    for (std::size_t off = 0; off < bytes.size(); off += kRecord) {
      const int label = bytes[off];
      if (label > 9) throw DataError("label out of range in " + path.string());
      ds.labels.push_back(label);
      for (std::size_t i = 1; i < kRecord; ++i) data.push_back(bytes[off + i] / 255.0);
    }
  };
  for (int i = 1; i <= 5; ++i) read_batch("data_batch_" + std::to_string(i) + ".bin");
  const std::size_t n_train = ds.labels.size();
  read_batch("test_batch.bin");
  ds.inputs = Matrix(ds.labels.size(), kRecord - 1, std::move(data));
  detail::tag_train_valid(ds, n_train, valid_holdout);
  ds.splits.resize(ds.size(), Split::test);
  return ds;
}

/// Synthetic regression: x ~ N(0, I_d), y = tanh(A x) + c with a Gaussian
/// teacher A (k x d, k = max(1, d/2)) and bias c. All samples are `train`.
inline Dataset synthetic_regression(std::size_t n, std::size_t d, Rng& rng, double teacher_scale = 1.0) {
  if (n < 1 || d < 1) throw ParameterError("synthetic_regression: n and d must be >= 1");
  const std::size_t k = std::max<std::size_t>(1, d / 2);
  Rng teacher_rng = rng.split("teacher");
  Rng input_rng = rng.split("inputs");
  const Matrix A = gaussian_matrix(k, d, teacher_scale / std::sqrt(static_cast<double>(d)), teacher_rng);
  const Vector c = gaussian_noise(k, 0.1, teacher_rng);
  Dataset ds;
  ds.inputs = gaussian_matrix(n, d, 1.0, input_rng);
  Matrix pre = matmul_nt(ds.inputs, A);  // n x k
  ds.targets = Matrix(n, k);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) ds.targets(i, j) = std::tanh(pre(i, j)) + c[j];
  ds.splits.assign(n, Split::train);
  return ds;
}

}  // namespace tprop
