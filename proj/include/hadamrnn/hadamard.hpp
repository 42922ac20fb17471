#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hadamrnn/error.hpp"
#include "hadamrnn/matrix.hpp"

namespace hadamrnn {

/// Order k of a Sylvester matrix H_{2^k}.
class SylvesterOrder {
 public:
  static constexpr int max_order = 30;

  explicit SylvesterOrder(int k) : k_(k) {
    detail::require(k >= 1, ErrorKind::invalid_order,
                    "Sylvester order must be >= 1, got " + std::to_string(k));
    detail::require(k <= max_order, ErrorKind::invalid_order,
                    "Sylvester order " + std::to_string(k) + " overflows the index type");
  }

  int k() const noexcept { return k_; }
  std::size_t size() const noexcept { return std::size_t{1} << k_; }

  friend bool operator==(SylvesterOrder, SylvesterOrder) = default;

 private:
  int k_;
};

/// Dense materialization is only for tests and small models.
inline constexpr std::size_t max_dense_size = 4096;

/// Orders from this value up use the fast Walsh-Hadamard transform.
inline constexpr int fast_transform_min_order = 5;

/// Entry (i, j) of the Sylvester matrix: (-1)^popcount(i & j).
constexpr int sylvester_entry(std::uint64_t i, std::uint64_t j) noexcept {
  return (std::popcount(i & j) & 1) ? -1 : 1;
}

/// Builds H_{2^k} by the doubling H_k = [[H_{k-1}, H_{k-1}], [H_{k-1}, -H_{k-1}]].
inline IntMatrix sylvester(SylvesterOrder order) {
  const std::size_t n = order.size();
  detail::require(n <= max_dense_size, ErrorKind::invalid_order,
                  "dense Sylvester matrix capped at size " +
                      std::to_string(max_dense_size));
  IntMatrix h(n, n);
  h(0, 0) = 1;
  for (std::size_t m = 1; m < n; m *= 2) {
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < m; ++c) {
        const long long v = h(r, c);
        h(r, c + m) = v;
        h(r + m, c) = v;
        h(r + m, c + m) = -v;
      }
  }
  return h;
}

/// A ⊗ B: block (i, j) is a_ij·B.
template <typename T>
BasicMatrix<T> kronecker(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  const std::size_t rows = a.rows() * b.rows();
  const std::size_t cols = a.cols() * b.cols();
  detail::require(a.rows() == 0 || rows / a.rows() == b.rows(),
                  ErrorKind::overflow, "kronecker: row count overflows");
  detail::require(a.cols() == 0 || cols / a.cols() == b.cols(),
                  ErrorKind::overflow, "kronecker: column count overflows");
  BasicMatrix<T> out(rows, cols);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) {
      const T aij = a(i, j);
      for (std::size_t r = 0; r < b.rows(); ++r)
        for (std::size_t c = 0; c < b.cols(); ++c)
          out(i * b.rows() + r, j * b.cols() + c) = aij * b(r, c);
    }
  return out;
}

/// In-place unnormalized Walsh-Hadamard transform in Sylvester order, v <- H v.
/// Works for integer element types too (exact).
template <typename T>
void fwht_inplace(std::span<T> v) {
  const std::size_t n = v.size();
  for (std::size_t h = 1; h < n; h *= 2)
    for (std::size_t i = 0; i < n; i += 2 * h)
      for (std::size_t j = i; j < i + h; ++j) {
        const T a = v[j];
        const T b = v[j + h];
        v[j] = a + b;
        v[j + h] = a - b;
      }
}

/// v <- H v by the popcount formula, O(n^2); cheaper than the butterfly for small n.
template <typename T>
void dense_hadamard_inplace(std::span<T> v) {
  constexpr std::size_t cap = std::size_t{1} << (fast_transform_min_order - 1);
  const std::size_t n = v.size();
  detail::require(n <= cap, ErrorKind::shape, "dense transform is for small blocks only");
  T buf[cap];
  for (std::size_t i = 0; i < n; ++i) {
    T acc{};
    for (std::size_t j = 0; j < n; ++j)
      acc = sylvester_entry(i, j) > 0 ? acc + v[j] : acc - v[j];
    buf[i] = acc;
  }
  for (std::size_t i = 0; i < n; ++i) v[i] = buf[i];
}

/// v <- (I_q ⊗ H_{2^k}) v
template <typename T>
void block_hadamard_inplace(std::span<T> v, SylvesterOrder order) {
  const std::size_t n = order.size();
  detail::require(v.size() % n == 0, ErrorKind::shape,
                  "block transform: length is not a multiple of the block size");
  for (std::size_t off = 0; off < v.size(); off += n) {
    auto block = v.subspan(off, n);
    if (order.k() >= fast_transform_min_order)
      fwht_inplace(block);
    else
      dense_hadamard_inplace(block);
  }
}

/// Binary ±1 vector with its real-valued training shadow. sign(0) = +1.
class SignVector {
 public:
  SignVector() = default;

  static SignVector ones(std::size_t n) {
    return from_signs(std::vector<std::int8_t>(n, 1));
  }

  static SignVector from_signs(std::vector<std::int8_t> signs) {
    SignVector s;
    s.latent_.resize(signs.size());
    for (std::size_t i = 0; i < signs.size(); ++i) {
      detail::require(signs[i] == 1 || signs[i] == -1, ErrorKind::invalid_argument,
                      "sign vector entries must be +1 or -1");
      s.latent_[i] = signs[i];
    }
    s.signs_ = std::move(signs);
    return s;
  }

  static SignVector from_latent(Vector latent) {
    SignVector s;
    s.signs_.resize(latent.size());
    for (std::size_t i = 0; i < latent.size(); ++i) {
      detail::require(!std::isnan(latent[i]), ErrorKind::numerical,
                      "latent sign entry is NaN");
      s.signs_[i] = binarize(latent[i]);
    }
    s.latent_ = std::move(latent);
    return s;
  }

  static constexpr std::int8_t binarize(double x) noexcept {
    return x >= 0.0 ? std::int8_t{1} : std::int8_t{-1};
  }

  std::size_t size() const noexcept { return signs_.size(); }
  const std::vector<std::int8_t>& signs() const noexcept { return signs_; }
  const Vector& latent() const noexcept { return latent_; }
  std::int8_t operator[](std::size_t i) const { return signs_[i]; }

  /// +1 -> bit 1, -1 -> bit 0, little-endian bit order inside each byte.
  std::vector<std::uint8_t> pack_bits() const {
    std::vector<std::uint8_t> bytes((signs_.size() + 7) / 8, 0);
    for (std::size_t i = 0; i < signs_.size(); ++i)
      if (signs_[i] > 0) bytes[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
    return bytes;
  }

  static SignVector unpack_bits(std::span<const std::uint8_t> bytes, std::size_t n) {
    detail::require(bytes.size() == (n + 7) / 8, ErrorKind::data,
                    "packed sign vector has wrong byte count");
    std::vector<std::int8_t> signs(n);
    for (std::size_t i = 0; i < n; ++i)
      signs[i] = (bytes[i / 8] >> (i % 8)) & 1u ? 1 : -1;
    return from_signs(std::move(signs));
  }

  /// Signs only; the latent shadow is training state.
  friend bool operator==(const SignVector& a, const SignVector& b) {
    return a.signs_ == b.signs_;
  }

 private:
  std::vector<std::int8_t> signs_;
  Vector latent_;
};

enum class RecurrentKind : std::uint8_t { binary = 0, block_ternary = 1 };

/// W = scale · diag(row_signs) · (I_q ⊗ H_{2^k}) · diag(col_signs).
struct RecurrentParam {
  RecurrentKind kind = RecurrentKind::binary;
  SylvesterOrder order{1};
  std::size_t q = 1;
  SignVector row_signs;
  std::optional<SignVector> col_signs;

  std::size_t size() const noexcept { return q * order.size(); }
  double scale() const noexcept {
    return 1.0 / std::sqrt(static_cast<double>(order.size()));
  }
  std::size_t nonzeros() const noexcept { return size() * order.size(); }
};

inline RecurrentParam make_recurrent(RecurrentKind kind, SylvesterOrder order,
                                     std::size_t q, SignVector row_signs) {
  detail::require(q >= 1, ErrorKind::invalid_argument, "block count q must be >= 1");
  detail::require(kind != RecurrentKind::binary || q == 1, ErrorKind::invalid_argument,
                  "binary recurrent weights require q = 1");
  detail::require(row_signs.size() == q * order.size(), ErrorKind::shape,
                  "row sign vector length must equal q * 2^k");
  return RecurrentParam{kind, order, q, std::move(row_signs), std::nullopt};
}

/// Hidden size d_h = 2^k (binary) or q·2^k (block-ternary) -> parameter with all-ones signs.
inline RecurrentParam make_recurrent_ones(RecurrentKind kind, int k, std::size_t q) {
  SylvesterOrder order(k);
  return make_recurrent(kind, order, q, SignVector::ones(q * order.size()));
}

inline RecurrentParam switch_columns(RecurrentParam param, SignVector col_signs) {
  detail::require(col_signs.size() == param.size(), ErrorKind::shape,
                  "column sign vector length must equal d_h");
  param.col_signs = std::move(col_signs);
  return param;
}

/// out = scale · (I_q ⊗ H)(diag(c) v): the recurrent product before the row signs.
/// Training caches this to form the sign-vector gradient.
inline void apply_unsigned(const RecurrentParam& p, std::span<const double> v,
                           std::span<double> out) {
  detail::require(v.size() == p.size() && out.size() == p.size(), ErrorKind::shape,
                  "recurrent product: vector length must equal d_h");
  if (p.col_signs) {
    const auto& c = p.col_signs->signs();
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = c[i] * v[i];
  } else {
    std::copy(v.begin(), v.end(), out.begin());
  }
  block_hadamard_inplace(out, p.order);
  const double s = p.scale();
  for (double& x : out) x *= s;
}

inline void apply_w(const RecurrentParam& p, std::span<const double> v,
                    std::span<double> out) {
  apply_unsigned(p, v, out);
  const auto& r = p.row_signs.signs();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= r[i];
}

inline Vector apply_w(const RecurrentParam& p, std::span<const double> v) {
  Vector out(p.size());
  apply_w(p, v, out);
  return out;
}

/// Wᵀ v = scale · diag(c) (I_q ⊗ H) diag(r) v, using H = Hᵀ.
inline void apply_w_transpose(const RecurrentParam& p, std::span<const double> v,
                              std::span<double> out) {
  detail::require(v.size() == p.size() && out.size() == p.size(), ErrorKind::shape,
                  "recurrent transpose product: vector length must equal d_h");
  const auto& r = p.row_signs.signs();
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = r[i] * v[i];
  block_hadamard_inplace(out, p.order);
  const double s = p.scale();
  if (p.col_signs) {
    const auto& c = p.col_signs->signs();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s * c[i];
  } else {
    for (double& x : out) x *= s;
  }
}

inline Vector apply_w_transpose(const RecurrentParam& p, std::span<const double> v) {
  Vector out(p.size());
  apply_w_transpose(p, v, out);
  return out;
}

/// Integer sign pattern of W / scale, entries in {-1, 0, 1}.
inline IntMatrix materialize_codes(const RecurrentParam& p) {
  const std::size_t n = p.size();
  detail::require(n <= max_dense_size, ErrorKind::shape,
                  "dense recurrent matrix capped at d_h = " + std::to_string(max_dense_size));
  const std::size_t b = p.order.size();
  IntMatrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t blk = i / b;
    for (std::size_t j = blk * b; j < (blk + 1) * b; ++j) {
      long long v = sylvester_entry(i - blk * b, j - blk * b) * p.row_signs[i];
      if (p.col_signs) v *= (*p.col_signs)[j];
      m(i, j) = v;
    }
  }
  return m;
}

inline Matrix materialize(const RecurrentParam& p) {
  const IntMatrix codes = materialize_codes(p);
  const double s = p.scale();
  Matrix m(codes.rows(), codes.cols());
  for (std::size_t i = 0; i < codes.size(); ++i)
    m.data()[i] = s * static_cast<double>(codes.data()[i]);
  return m;
}

}  // namespace hadamrnn
