#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>

#include "hadamrnn/error.hpp"
#include "hadamrnn/matrix.hpp"

namespace hadamrnn {

/// How the input and output matrices are represented.
struct WeightQuant {
  enum class Kind : std::uint8_t { full_precision = 0, uniform = 1, ternary = 2 };

  Kind kind = Kind::full_precision;
  int bits = 0;  ///< only meaningful for uniform

  static WeightQuant full() { return {Kind::full_precision, 0}; }
  static WeightQuant ternary() { return {Kind::ternary, 2}; }
  static WeightQuant uniform(int p) {
    detail::require(p >= 2 && p <= 16, ErrorKind::invalid_bitwidth,
                    "uniform weight quantization needs 2 <= p <= 16, got " + std::to_string(p));
    return {Kind::uniform, p};
  }

  bool quantized() const noexcept { return kind != Kind::full_precision; }

  /// Bits counted per stored entry; ternary codes cost two bits.
  int storage_bits() const noexcept {
    switch (kind) {
      case Kind::uniform: return bits;
      case Kind::ternary: return 2;
      case Kind::full_precision: return 32;
    }
    return 32;
  }

  /// Fractional bits of the code grid: value = α · code / 2^frac.
  int frac_bits() const noexcept { return kind == Kind::uniform ? bits - 1 : 0; }

  std::string describe() const {
    switch (kind) {
      case Kind::uniform: return std::to_string(bits) + "-bit";
      case Kind::ternary: return "ternary";
      case Kind::full_precision: return "fp";
    }
    return "?";
  }

  friend bool operator==(const WeightQuant&, const WeightQuant&) = default;
};

using CodeMatrix = BasicMatrix<std::int32_t>;

/// Integer codes plus scale: value = α · code / 2^{p-1} (uniform) or α · code (ternary).
struct QuantizedDense {
  CodeMatrix codes;
  double alpha = 1.0;
  WeightQuant quant;

  std::size_t rows() const noexcept { return codes.rows(); }
  std::size_t cols() const noexcept { return codes.cols(); }

  double step() const noexcept {
    return alpha / static_cast<double>(std::int64_t{1} << quant.frac_bits());
  }

  Matrix decode() const {
    Matrix m(codes.rows(), codes.cols());
    const double s = step();
    for (std::size_t i = 0; i < codes.size(); ++i) m.data()[i] = s * codes.data()[i];
    return m;
  }

  friend bool operator==(const QuantizedDense&, const QuantizedDense&) = default;
};

namespace detail {

/// Round-half-to-even under the default floating-point environment.
inline double round_half_even(double x) { return std::nearbyint(x); }

inline double scale_of(const Matrix& m) {
  detail::require(all_finite(m.data()), ErrorKind::numerical, "quantize: non-finite matrix entry");
  const double a = max_abs(m.data());
  return a > 0.0 ? a : 1.0;  // all-zero matrix: α := 1, codes stay zero
}

}  // namespace detail

/// Uniform quantization on a given scale α; entries beyond the grid clamp.
inline QuantizedDense quantize_uniform(const Matrix& m, int p, double alpha) {
  detail::require(p >= 2, ErrorKind::invalid_bitwidth,
                  "uniform quantization needs p >= 2, got " + std::to_string(p));
  detail::require(alpha > 0.0 && std::isfinite(alpha), ErrorKind::invalid_argument,
                  "quantize: scale must be positive");
  detail::require(all_finite(m.data()), ErrorKind::numerical, "quantize: non-finite matrix entry");
  QuantizedDense out{CodeMatrix(m.rows(), m.cols()), alpha, WeightQuant::uniform(p)};
  const double half = static_cast<double>(std::int64_t{1} << (p - 1));
  const double inv_step = half / out.alpha;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double c = std::clamp(detail::round_half_even(m.data()[i] * inv_step), -half, half - 1);
    out.codes.data()[i] = static_cast<std::int32_t>(c);
  }
  return out;
}

inline QuantizedDense quantize_uniform(const Matrix& m, int p) {
  detail::require(p >= 2, ErrorKind::invalid_bitwidth,
                  "uniform quantization needs p >= 2, got " + std::to_string(p));
  return quantize_uniform(m, p, detail::scale_of(m));
}

/// Nearest of {-α, 0, α}; |x| = α/2 rounds to 0.
inline QuantizedDense quantize_ternary(const Matrix& m) {
  QuantizedDense out{CodeMatrix(m.rows(), m.cols()), detail::scale_of(m), WeightQuant::ternary()};
  for (std::size_t i = 0; i < m.size(); ++i)
    out.codes.data()[i] =
        static_cast<std::int32_t>(detail::round_half_even(m.data()[i] / out.alpha));
  return out;
}

inline QuantizedDense quantize(const Matrix& m, WeightQuant q) {
  switch (q.kind) {
    case WeightQuant::Kind::uniform: return quantize_uniform(m, q.bits);
    case WeightQuant::Kind::ternary: return quantize_ternary(m);
    case WeightQuant::Kind::full_precision: break;
  }
  throw Error(ErrorKind::invalid_argument, "quantize: full-precision is not a quantizer");
}

/// Dimensions needed for size and operation accounting.
struct ModelShape {
  std::size_t d_h = 0;
  std::size_t d_in = 0;
  std::size_t d_out = 0;
  std::size_t q = 1;            ///< Hadamard blocks in the recurrent matrix
  bool column_signs = false;
};

struct SizeReport {
  bool formula_applied = false;  ///< false when U, V are full precision
  std::uint64_t core_bits = 0;   ///< sign vector(s) + U + V
  std::uint64_t bias_bits = 0;   ///< (d_h + d_out) · p_a, reported separately
  std::uint64_t scale_bits = 0;  ///< α_U and α_V as 32-bit floats
  double core_kb() const noexcept { return static_cast<double>(core_bits) / 8192.0; }
  double bias_kb() const noexcept { return static_cast<double>(bias_bits) / 8192.0; }
  double total_kb() const noexcept {
    return static_cast<double>(core_bits + bias_bits + scale_bits) / 8192.0;
  }
};

/// d_h·(1 + (d_in + d_out)·p) bits; biases cost (d_h + d_out)·p_a bits
/// (32-bit floats when p_a is absent).
inline SizeReport model_size_bits(const ModelShape& s, WeightQuant quant,
                                  std::optional<int> activation_bits = std::nullopt) {
  SizeReport r;
  r.formula_applied = quant.quantized();
  const std::uint64_t sign_bits = s.d_h * (s.column_signs ? 2u : 1u);
  r.core_bits = sign_bits + static_cast<std::uint64_t>(s.d_in + s.d_out) * s.d_h *
                                static_cast<std::uint64_t>(quant.storage_bits());
  r.bias_bits = static_cast<std::uint64_t>(s.d_h + s.d_out) *
                static_cast<std::uint64_t>(activation_bits.value_or(32));
  r.scale_bits = quant.quantized() ? 64u : 0u;
  return r;
}

struct LayerOps {
  std::uint64_t multiplications = 0;
  std::uint64_t additions = 0;
};

struct OpCountReport {
  LayerOps input;
  LayerOps recurrent;
  LayerOps output;
};

/// Per-inference-step operation counts. Recurrent layer: no multiplications,
/// d_h·d_h/q additions. Ternary and 2-bit U/V need additions and shifts only.
inline OpCountReport op_count_report(const ModelShape& s, WeightQuant quant) {
  const bool mult_free = quant.kind == WeightQuant::Kind::ternary ||
                         (quant.kind == WeightQuant::Kind::uniform && quant.bits == 2);
  OpCountReport r;
  r.input.additions = s.d_in * s.d_h;
  r.input.multiplications = mult_free ? 0 : s.d_in * s.d_h;
  r.recurrent.multiplications = 0;
  r.recurrent.additions = s.d_h * (s.d_h / s.q);
  r.output.additions = s.d_h * s.d_out;
  r.output.multiplications = mult_free ? 0 : s.d_h * s.d_out;
  return r;
}

}  // namespace hadamrnn
