#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hadamrnn/binary_io.hpp"
#include "hadamrnn/error.hpp"
#include "hadamrnn/matrix.hpp"
#include "hadamrnn/ornn.hpp"
#include "hadamrnn/rng.hpp"

namespace hadamrnn {

/// Labeled fixed-length sequences stored compactly as bytes.
struct Dataset {
  enum class Encoding : std::uint8_t {
    one_hot = 0,  ///< one symbol per step, expanded to a one-hot vector of width d_in
    pixels = 1,   ///< d_in bytes per step, scaled by 1/255
  };

  Encoding encoding = Encoding::one_hot;
  std::size_t count = 0;
  std::size_t steps = 0;
  std::size_t d_in = 0;
  std::size_t classes = 0;
  OutputMode target_mode = OutputMode::many_to_many;
  std::vector<std::uint8_t> inputs;   ///< count × steps (× d_in for pixels)
  std::vector<std::uint8_t> targets;  ///< count × target_length()

  std::size_t size() const noexcept { return count; }
  bool empty() const noexcept { return count == 0; }
  std::size_t target_length() const noexcept {
    return target_mode == OutputMode::many_to_many ? steps : 1;
  }
  std::size_t step_width() const noexcept { return encoding == Encoding::one_hot ? 1 : d_in; }

  std::span<const std::uint8_t> raw_input(std::size_t i) const {
    const std::size_t w = steps * step_width();
    return {inputs.data() + i * w, w};
  }
  std::span<const std::uint8_t> target(std::size_t i) const {
    const std::size_t w = target_length();
    return {targets.data() + i * w, w};
  }

  /// Dense steps × d_in input matrix of sample i.
  Matrix sequence(std::size_t i) const {
    Matrix m(steps, d_in);
    const auto raw = raw_input(i);
    if (encoding == Encoding::one_hot) {
      for (std::size_t t = 0; t < steps; ++t) m(t, raw[t]) = 1.0;
    } else {
      for (std::size_t k = 0; k < raw.size(); ++k) m.data()[k] = raw[k] / 255.0;
    }
    return m;
  }

  /// First n samples.
  Dataset head(std::size_t n) const {
    n = std::min(n, count);
    Dataset d = *this;
    d.count = n;
    d.inputs.resize(n * steps * step_width());
    d.targets.resize(n * target_length());
    return d;
  }
};

struct DataSplits {
  Dataset train;
  Dataset val;
  Dataset test;
};

// ---------------------------------------------------------------------------
// Copy task

inline constexpr std::uint8_t copy_blank = 0;
inline constexpr std::uint8_t copy_marker = 9;
inline constexpr std::size_t copy_alphabet = 10;
inline constexpr std::size_t copy_classes = 9;

struct CopySpec {
  std::size_t K = 10;
  std::size_t L = 100;
  std::size_t train = 50000;
  std::size_t val = 2000;
  std::size_t test = 2000;
  std::uint64_t seed = 1;

  std::size_t steps() const noexcept { return L + 2 * K; }

  /// K·ln 8 / (L + 2K): cross-entropy of predicting blanks then uniform symbols.
  double baseline_cross_entropy() const {
    return static_cast<double>(K) * std::log(8.0) / static_cast<double>(steps());
  }
};

/// Input: K symbols from a1..a8, L blanks, the marker, K-1 blanks.
/// Target: L+K blanks, then the K symbols.
inline Dataset gen_copy(std::size_t K, std::size_t L, std::size_t count, std::uint64_t seed) {
  detail::require(K >= 1, ErrorKind::invalid_argument, "copy task needs K >= 1");
  Dataset d;
  d.encoding = Dataset::Encoding::one_hot;
  d.count = count;
  d.steps = L + 2 * K;
  d.d_in = copy_alphabet;
  d.classes = copy_classes;
  d.target_mode = OutputMode::many_to_many;
  d.inputs.assign(count * d.steps, copy_blank);
  d.targets.assign(count * d.steps, copy_blank);
  Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint8_t* in = d.inputs.data() + i * d.steps;
    std::uint8_t* out = d.targets.data() + i * d.steps;
    for (std::size_t j = 0; j < K; ++j) {
      const auto sym = static_cast<std::uint8_t>(1 + uniform_below(rng, 8));
      in[j] = sym;
      out[L + K + j] = sym;
    }
    in[K + L] = copy_marker;
  }
  return d;
}

inline DataSplits make_copy_splits(const CopySpec& spec) {
  return {gen_copy(spec.K, spec.L, spec.train, mix_seed(spec.seed, 0)),
          gen_copy(spec.K, spec.L, spec.val, mix_seed(spec.seed, 1)),
          gen_copy(spec.K, spec.L, spec.test, mix_seed(spec.seed, 2))};
}

// ---------------------------------------------------------------------------
// MNIST (IDX files)

inline constexpr std::uint32_t idx_images_magic = 0x00000803;
inline constexpr std::uint32_t idx_labels_magic = 0x00000801;
inline constexpr std::size_t mnist_pixels = 784;
inline constexpr std::uint64_t default_permutation_seed = 0x9d2c5680ULL;

namespace detail {
inline std::uint32_t read_be32(std::span<const std::uint8_t> b, std::size_t off) {
  require(off + 4 <= b.size(), ErrorKind::data, "IDX: truncated header");
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}
}  // namespace detail

struct IdxImages {
  std::size_t count = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> pixels;
};

inline IdxImages parse_idx_images(std::span<const std::uint8_t> b) {
  detail::require(detail::read_be32(b, 0) == idx_images_magic, ErrorKind::data,
                  "IDX images: bad magic");
  IdxImages img;
  img.count = detail::read_be32(b, 4);
  img.rows = detail::read_be32(b, 8);
  img.cols = detail::read_be32(b, 12);
  detail::require(img.rows * img.cols == mnist_pixels, ErrorKind::data,
                  "IDX images: expected 28x28 images");
  detail::require(b.size() == 16 + img.count * mnist_pixels, ErrorKind::data,
                  "IDX images: payload size does not match header");
  img.pixels.assign(b.begin() + 16, b.end());
  return img;
}

inline std::vector<std::uint8_t> parse_idx_labels(std::span<const std::uint8_t> b) {
  detail::require(detail::read_be32(b, 0) == idx_labels_magic, ErrorKind::data,
                  "IDX labels: bad magic");
  const std::size_t n = detail::read_be32(b, 4);
  detail::require(b.size() == 8 + n, ErrorKind::data, "IDX labels: payload size does not match header");
  std::vector<std::uint8_t> labels(b.begin() + 8, b.end());
  for (auto l : labels) detail::require(l <= 9, ErrorKind::data, "IDX labels: label out of [0, 9]");
  return labels;
}

/// Fixed pixel permutation for pMNIST, reproducible from its seed.
inline std::vector<std::uint32_t> mnist_permutation(std::uint64_t seed = default_permutation_seed) {
  std::vector<std::uint32_t> p(mnist_pixels);
  for (std::uint32_t i = 0; i < p.size(); ++i) p[i] = i;
  Rng rng(seed);
  portable_shuffle(p, rng);
  return p;
}

enum class MnistMode : std::uint8_t { sequential = 0, permuted = 1 };

/// Builds a many-to-one pixel-sequence dataset; step t reads pixel perm[t].
inline Dataset mnist_dataset(const IdxImages& img, std::span<const std::uint8_t> labels,
                             const std::vector<std::uint32_t>* perm) {
  detail::require(img.count == labels.size(), ErrorKind::data,
                  "MNIST: image and label counts differ");
  Dataset d;
  d.encoding = Dataset::Encoding::pixels;
  d.count = img.count;
  d.steps = mnist_pixels;
  d.d_in = 1;
  d.classes = 10;
  d.target_mode = OutputMode::many_to_one;
  d.targets.assign(labels.begin(), labels.end());
  if (!perm) {
    d.inputs = img.pixels;
    return d;
  }
  detail::require(perm->size() == mnist_pixels, ErrorKind::invalid_argument,
                  "MNIST: permutation must have 784 entries");
  d.inputs.resize(img.pixels.size());
  for (std::size_t i = 0; i < img.count; ++i)
    for (std::size_t t = 0; t < mnist_pixels; ++t)
      d.inputs[i * mnist_pixels + t] = img.pixels[i * mnist_pixels + (*perm)[t]];
  return d;
}

struct MnistSpec {
  std::filesystem::path dir;
  MnistMode mode = MnistMode::sequential;
  std::uint64_t permutation_seed = default_permutation_seed;
  std::size_t subset = 0;  ///< 0 = whole training split
};

inline Dataset slice(const Dataset& d, std::size_t begin, std::size_t end) {
  Dataset out = d;
  out.count = end - begin;
  const std::size_t w = d.steps * d.step_width();
  out.inputs.assign(d.inputs.begin() + begin * w, d.inputs.begin() + end * w);
  const std::size_t tw = d.target_length();
  out.targets.assign(d.targets.begin() + begin * tw, d.targets.begin() + end * tw);
  return out;
}

/// 50k/10k from the training files, test from t10k. Smaller files keep a 5:1 split.
inline DataSplits load_mnist(const MnistSpec& spec) {
  auto load = [&](const char* images, const char* labels) {
    const auto ib = io::read_file((spec.dir / images).string());
    const auto lb = io::read_file((spec.dir / labels).string());
    return std::pair{parse_idx_images(ib), parse_idx_labels(lb)};
  };
  std::vector<std::uint32_t> perm;
  if (spec.mode == MnistMode::permuted) perm = mnist_permutation(spec.permutation_seed);
  const auto* pp = spec.mode == MnistMode::permuted ? &perm : nullptr;

  auto [tr_img, tr_lab] = load("train-images-idx3-ubyte", "train-labels-idx1-ubyte");
  auto [te_img, te_lab] = load("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte");
  const Dataset full = mnist_dataset(tr_img, tr_lab, pp);
  const std::size_t n_val = full.count >= 60000 ? 10000 : full.count / 6;
  const std::size_t n_train = full.count >= 60000 ? 50000 : full.count - n_val;

  DataSplits s;
  s.train = slice(full, 0, n_train);
  s.val = slice(full, n_train, n_train + n_val);
  s.test = mnist_dataset(te_img, te_lab, pp);
  if (spec.subset > 0) s.train = s.train.head(spec.subset);
  return s;
}

// ---------------------------------------------------------------------------
// Batching

/// Index batches for one epoch, shuffled by `epoch_seed`; the last partial batch is kept.
inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size,
                                                          std::uint64_t epoch_seed) {
  detail::require(batch_size >= 1, ErrorKind::invalid_argument, "batch size must be >= 1");
  const auto order = shuffled_indices(n, epoch_seed);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t b = 0; b < n; b += batch_size)
    batches.emplace_back(order.begin() + b, order.begin() + std::min(n, b + batch_size));
  return batches;
}

// ---------------------------------------------------------------------------
// Dataset cache: "HDRD", u32 version, u64 spec hash, header fields, length-prefixed arrays.

inline constexpr std::uint32_t dataset_cache_version = 1;

inline std::vector<std::uint8_t> encode_dataset(const Dataset& d, std::uint64_t spec_hash) {
  io::ByteWriter w;
  w.put_tag("HDRD");
  w.put(dataset_cache_version);
  w.put(spec_hash);
  w.put(static_cast<std::uint8_t>(d.encoding));
  w.put(static_cast<std::uint8_t>(d.target_mode));
  w.put(static_cast<std::uint64_t>(d.count));
  w.put(static_cast<std::uint64_t>(d.steps));
  w.put(static_cast<std::uint64_t>(d.d_in));
  w.put(static_cast<std::uint64_t>(d.classes));
  w.put_array<std::uint8_t>(d.inputs);
  w.put_array<std::uint8_t>(d.targets);
  return w.bytes();
}

struct CachedDataset {
  Dataset data;
  std::uint64_t spec_hash = 0;
};

inline CachedDataset decode_dataset(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  r.expect_tag("HDRD", "dataset cache");
  const auto version = r.get<std::uint32_t>();
  detail::require(version == dataset_cache_version, ErrorKind::data,
                  "dataset cache: unsupported version " + std::to_string(version));
  CachedDataset c;
  c.spec_hash = r.get<std::uint64_t>();
  auto& d = c.data;
  const auto enc = r.get<std::uint8_t>();
  const auto mode = r.get<std::uint8_t>();
  detail::require(enc <= 1 && mode <= 1, ErrorKind::data, "dataset cache: bad enum value");
  d.encoding = static_cast<Dataset::Encoding>(enc);
  d.target_mode = static_cast<OutputMode>(mode);
  d.count = r.get<std::uint64_t>();
  d.steps = r.get<std::uint64_t>();
  d.d_in = r.get<std::uint64_t>();
  d.classes = r.get<std::uint64_t>();
  d.inputs = r.get_array<std::uint8_t>();
  d.targets = r.get_array<std::uint8_t>();
  detail::require(d.inputs.size() == d.count * d.steps * d.step_width() &&
                      d.targets.size() == d.count * d.target_length(),
                  ErrorKind::data, "dataset cache: array lengths do not match header");
  detail::require(r.at_end(), ErrorKind::data, "dataset cache: trailing bytes");
  return c;
}

inline std::uint64_t copy_spec_hash(const CopySpec& s, std::size_t split) {
  const std::string key = "copy;K=" + std::to_string(s.K) + ";L=" + std::to_string(s.L) +
                          ";n=" + std::to_string(s.train) + "," + std::to_string(s.val) + "," +
                          std::to_string(s.test) + ";seed=" + std::to_string(s.seed) +
                          ";split=" + std::to_string(split);
  return io::fnv1a(key);
}

}  // namespace hadamrnn
