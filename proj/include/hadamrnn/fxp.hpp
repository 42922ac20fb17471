#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hadamrnn/datasets.hpp"
#include "hadamrnn/error.hpp"
#include "hadamrnn/hadamard.hpp"
#include "hadamrnn/matrix.hpp"
#include "hadamrnn/ornn.hpp"
#include "hadamrnn/quantizer.hpp"

namespace hadamrnn {

// ---------------------------------------------------------------------------
// Fixed-point numbers: value = code / 2^q, code in ⟦−2^{p−1}, 2^{p−1}−1⟧.

struct FxFormat {
  int p = 1;  ///< total bits
  int q = 0;  ///< fractional bits

  FxFormat() = default;
  FxFormat(int bits, int frac) : p(bits), q(frac) {
    detail::require(bits >= 1 && bits <= 63, ErrorKind::invalid_bitwidth,
                    "fixed-point width must be in [1, 63], got " + std::to_string(bits));
    detail::require(frac >= 0 && frac <= 62, ErrorKind::invalid_bitwidth,
                    "fractional bits must be in [0, 62]");
  }

  /// Q̄_q: p = q + 1, values in [−1, 1).
  static FxFormat unit(int frac) { return FxFormat(frac + 1, frac); }

  std::int64_t min_code() const noexcept { return -(std::int64_t{1} << (p - 1)); }
  std::int64_t max_code() const noexcept { return (std::int64_t{1} << (p - 1)) - 1; }
  bool contains(std::int64_t code) const noexcept { return code >= min_code() && code <= max_code(); }
  double step() const noexcept { return std::ldexp(1.0, -q); }

  friend bool operator==(const FxFormat&, const FxFormat&) = default;
};

struct FxTensor {
  std::vector<std::int64_t> values;
  FxFormat format;

  FxTensor() = default;
  FxTensor(std::vector<std::int64_t> v, FxFormat f) : values(std::move(v)), format(f) {
    for (auto x : values)
      detail::require(format.contains(x), ErrorKind::overflow,
                      "fixed-point code " + std::to_string(x) + " outside its format");
  }

  std::size_t size() const noexcept { return values.size(); }

  Vector decode() const {
    Vector out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i)
      out[i] = std::ldexp(static_cast<double>(values[i]), -format.q);
    return out;
  }
};

/// Exact sum; output format (max(p, p') + 1, q).
inline FxTensor fx_add(const FxTensor& a, const FxTensor& b) {
  detail::require(a.format.q == b.format.q, ErrorKind::invalid_argument,
                  "fx_add: fractional bits differ");
  detail::require(a.size() == b.size(), ErrorKind::shape, "fx_add: length mismatch");
  std::vector<std::int64_t> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a.values[i] + b.values[i];
  return FxTensor(std::move(out), FxFormat(std::max(a.format.p, b.format.p) + 1, a.format.q));
}

/// Exact elementwise product; output format (p + p' − 1, q + q').
/// The single product min·min does not fit that format and raises overflow.
inline FxTensor fx_mul(const FxTensor& a, const FxTensor& b) {
  detail::require(a.size() == b.size(), ErrorKind::shape, "fx_mul: length mismatch");
  const FxFormat f(a.format.p + b.format.p - 1, a.format.q + b.format.q);
  std::vector<std::int64_t> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a.values[i] * b.values[i];
  return FxTensor(std::move(out), f);
}

inline int ceil_log2(std::uint64_t n) noexcept {
  return n <= 1 ? 0 : std::bit_width(n - 1);
}

/// Accumulator format for W̃h: codes in {−2, −1, 0, 1} (Q̄₁) times h.
inline FxFormat matvec_accumulator(FxFormat h, std::size_t cols) {
  return FxFormat(h.p + 2 + ceil_log2(cols), h.q + 1);
}

/// Wt h with Wt in Q̄₁ (integer codes in {−2, −1, 0, 1}), using shifts and adds only.
inline FxTensor fx_matvec(const IntMatrix& wt, const FxTensor& h) {
  detail::require(wt.cols() == h.size(), ErrorKind::shape, "fx_matvec: width mismatch");
  const FxFormat acc_fmt = matvec_accumulator(h.format, wt.cols());
  std::vector<std::int64_t> out(wt.rows(), 0);
  for (std::size_t i = 0; i < wt.rows(); ++i) {
    std::int64_t acc = 0;
    for (std::size_t j = 0; j < wt.cols(); ++j) {
      const std::int64_t x = h.values[j];
      switch (wt(i, j)) {
        case 0: break;
        case 1: acc += x; break;
        case -1: acc -= x; break;
        case -2: acc -= x << 1; break;
        default:
          throw Error(ErrorKind::invalid_argument, "fx_matvec: weight code outside {-2,-1,0,1}");
      }
    }
    detail::require(acc_fmt.contains(acc), ErrorKind::overflow, "fx_matvec: accumulator overflow");
    out[i] = acc;
  }
  return FxTensor(std::move(out), acc_fmt);
}

/// W̃-codes (Q̄₁ codes, = r_i·H_ij·c_j) of the recurrent matrix W = α_W·W̃.
inline IntMatrix recurrent_codes(const RecurrentParam& p) { return materialize_codes(p); }

/// W̃ h̃ for the recurrent matrix via an integer Walsh-Hadamard transform.
/// Same result as fx_matvec(recurrent_codes(p), h).
inline FxTensor recurrent_matvec(const RecurrentParam& p, const FxTensor& h) {
  detail::require(h.size() == p.size(), ErrorKind::shape, "recurrent_matvec: length mismatch");
  std::vector<std::int64_t> v = h.values;
  if (p.col_signs) {
    const auto& c = p.col_signs->signs();
    for (std::size_t j = 0; j < v.size(); ++j) v[j] *= c[j];
  }
  block_hadamard_inplace<std::int64_t>(v, p.order);
  const auto& r = p.row_signs.signs();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] *= r[i];
  return FxTensor(std::move(v), matvec_accumulator(h.format, p.order.size()));
}

// ---------------------------------------------------------------------------
// Requantization onto the hidden grid α_h · Q̄_{p_a−1}

namespace detail {

/// round(a / 2^s), ties to even; s >= 1.
inline std::int64_t shift_round_even(std::int64_t a, int s) {
  const std::int64_t fl = a >> s;  // floor
  const std::int64_t rem = a - (fl << s);
  const std::int64_t half = std::int64_t{1} << (s - 1);
  if (rem > half || (rem == half && (fl & 1))) return fl + 1;
  return fl;
}

/// sign(x − y·√2) for integers, exact.
inline int cmp_sqrt2(__int128 x, __int128 y) {
  // compare x with y√2
  const int sx = (x > 0) - (x < 0);
  const int sy = (y > 0) - (y < 0);
  if (sx != sy) return sx > sy ? 1 : -1;
  if (sx == 0) return 0;
  const __int128 lhs = x * x;
  const __int128 rhs = 2 * y * y;
  const int mag = (lhs > rhs) - (lhs < rhs);
  return sx > 0 ? mag : -mag;
}

}  // namespace detail

/// Maps an integer sum S (value S / 2^F) to the nearest code of α_h·Q̄_{p_a−1}
/// where α_h = 2^e·r, r ∈ {1, √2}. Integer arithmetic only.
struct Requantizer {
  int sum_frac = 0;     ///< F
  int grid_frac = 0;    ///< p_a − 1
  int exponent = 0;     ///< e
  bool sqrt2 = false;   ///< r = √2

  /// nearest integer to S · 2^{grid_frac} / (2^{F+e} · r), ties to even.
  std::int64_t operator()(std::int64_t sum) const {
    const int s = sum_frac + exponent - grid_frac;  // divide by 2^s
    if (!sqrt2) {
      if (s <= 0) {
        detail::require(s > -62 && std::abs(sum) <= (std::numeric_limits<std::int64_t>::max() >> -s),
                        ErrorKind::overflow, "requantize: shift overflow");
        return sum << -s;
      }
      if (s >= 63) return 0;
      return detail::shift_round_even(sum, s);
    }
    // x = a / (2^s √2): estimate, then correct so |x − m| < 1/2 holds exactly.
    __int128 a = sum;
    int shift = s;
    if (shift < 0) {
      detail::require(shift > -40, ErrorKind::overflow, "requantize: shift overflow");
      a <<= -shift;
      shift = 0;
    }
    detail::require(shift < 60, ErrorKind::overflow, "requantize: shift too large");
    const long double est = static_cast<long double>(a) /
                            (std::ldexp(1.0L, shift) * std::sqrt(2.0L));
    auto m = static_cast<std::int64_t>(std::llround(est));
    const __int128 p2 = static_cast<__int128>(1) << shift;
    // m is correct iff (2m − 1)·2^s·√2 < 2a < (2m + 1)·2^s·√2 (no ties: √2 is irrational).
    for (int guard = 0; guard < 8; ++guard) {
      if (detail::cmp_sqrt2(2 * a, (2 * static_cast<__int128>(m) + 1) * p2) > 0) {
        ++m;
      } else if (detail::cmp_sqrt2(2 * a, (2 * static_cast<__int128>(m) - 1) * p2) < 0) {
        --m;
      } else {
        return m;
      }
    }
    throw Error(ErrorKind::numerical, "requantize: estimate did not converge");
  }
};

// ---------------------------------------------------------------------------
// Post-training quantization plan

struct PtqPlan {
  int p_a = 12;   ///< hidden-state bits
  int p_i = 2;    ///< input bits
  WeightQuant weight_quant;
  double alpha_U = 1.0;
  double alpha_V = 1.0;
  double alpha_W = 1.0;
  double alpha_i = 1.0;
  double alpha_h = 1.0;
  int n_h = 0;
  double max_h = 0.0;
  int k = 1;  ///< Sylvester order
  std::vector<std::int64_t> bias_codes;  ///< b_i/(α_iα_U) on α_h·Q̄_{p_a−1}
  Requantizer requant;
  int accumulator_bits = 0;  ///< width of the aligned pre-activation sum

  FxFormat hidden_format() const { return FxFormat::unit(p_a - 1); }
  FxFormat input_format() const { return FxFormat::unit(p_i - 1); }

  /// α_h = 2^{n_h} / α_W.
  bool consistent() const {
    const double expected = std::ldexp(1.0, n_h) / alpha_W;
    return std::abs(alpha_h - expected) <= 1e-12 * expected;
  }
};

/// 2 / √(2^k).
inline double alpha_w_for(SylvesterOrder order) {
  return 2.0 / std::sqrt(static_cast<double>(order.size()));
}

/// Smallest n ≥ 0 with 2^n ≥ x.
inline int shift_for(double x) {
  detail::require(std::isfinite(x) && x >= 0.0, ErrorKind::numerical,
                  "shift_for: range must be finite and non-negative");
  int n = 0;
  while (std::ldexp(1.0, n) < x) {
    ++n;
    detail::require(n < 62, ErrorKind::overflow, "hidden range too large for fixed point");
  }
  return n;
}

/// Input scale convention: 2 for one-hot symbols, 1 for pixels in [0, 1].
inline double default_alpha_i(const Dataset& d) {
  return d.encoding == Dataset::Encoding::one_hot ? 2.0 : 1.0;
}

/// Largest |h_t| of the rescaled network (parameters divided by α_i·α_U) over the data.
inline double rescaled_max_h(const OrnnModel& m, const Dataset& data, double alpha_i,
                             unsigned threads = 1) {
  const auto w = effective_weights(m);
  const double lambda = 1.0 / (alpha_i * m.U.quantized().alpha);
  std::vector<double> peaks(data.size(), 0.0);
  parallel_for(data.size(), threads, [&](std::size_t i) {
    const auto fw = forward(m, w, data.sequence(i));
    double mx = 0.0;
    for (const auto& h : fw.trace.states) mx = std::max(mx, max_abs(h));
    peaks[i] = mx * lambda;
  });
  double mx = 0.0;
  for (double x : peaks) mx = std::max(mx, x);
  return mx;
}

inline PtqPlan calibrate(const OrnnModel& m, const Dataset& calib, int p_a, int p_i,
                         std::optional<double> alpha_i = std::nullopt, unsigned threads = 1) {
  m.validate();
  detail::require(!calib.empty(), ErrorKind::data, "calibrate: empty calibration set");
  detail::require(calib.d_in == m.d_in(), ErrorKind::shape, "calibrate: dataset width != d_in");
  detail::require(m.quant().quantized(), ErrorKind::invalid_argument,
                  "calibrate: U and V must be quantized");
  detail::require(p_a >= 1 && p_a <= 30, ErrorKind::invalid_bitwidth, "p_a must be in [1, 30]");
  detail::require(p_i >= 1 && p_i <= 30, ErrorKind::invalid_bitwidth, "p_i must be in [1, 30]");

  PtqPlan plan;
  plan.p_a = p_a;
  plan.p_i = p_i;
  plan.weight_quant = m.quant();
  const auto qU = m.U.quantized();
  const auto qV = m.V.quantized();
  plan.alpha_U = qU.alpha;
  plan.alpha_V = qV.alpha;
  plan.alpha_i = alpha_i.value_or(default_alpha_i(calib));
  detail::require(plan.alpha_i > 0.0, ErrorKind::invalid_argument, "alpha_i must be positive");
  plan.k = m.W.order.k();
  plan.alpha_W = alpha_w_for(m.W.order);
  plan.max_h = rescaled_max_h(m, calib, plan.alpha_i, threads);
  plan.n_h = shift_for(plan.max_h * plan.alpha_W);
  plan.alpha_h = std::ldexp(1.0, plan.n_h) / plan.alpha_W;

  // α_h = 2^{n_h}·√(2^k)/2 = 2^e·r
  const int twice = 2 * plan.n_h + plan.k - 2;  // log2(α_h²)
  plan.requant.sqrt2 = (twice % 2) != 0;
  plan.requant.exponent = plan.requant.sqrt2 ? (twice - 1) / 2 : twice / 2;
  plan.requant.grid_frac = p_a - 1;
  const int frac_w = p_a;  // Q̄₁ × Q̄_{p_a−1}
  const int frac_u = m.quant().frac_bits() + p_i - 1;
  plan.requant.sum_frac = std::max(frac_w, frac_u);

  const auto hf = plan.hidden_format();
  plan.bias_codes.resize(m.d_h());
  const double to_code = std::ldexp(1.0, p_a - 1) / plan.alpha_h;
  for (std::size_t i = 0; i < m.d_h(); ++i) {
    const double c = detail::round_half_even(m.b_i[i] / (plan.alpha_i * plan.alpha_U) * to_code);
    plan.bias_codes[i] = static_cast<std::int64_t>(
        std::clamp(c, static_cast<double>(hf.min_code()), static_cast<double>(hf.max_code())));
  }

  const int acc_w = matvec_accumulator(hf, m.W.order.size()).p + plan.n_h + (plan.requant.sum_frac - frac_w);
  const int acc_u = p_i + m.quant().storage_bits() + ceil_log2(m.d_in()) + (plan.requant.sum_frac - frac_u);
  plan.accumulator_bits = std::max(acc_w, acc_u) + 1;
  detail::require(plan.accumulator_bits <= 62, ErrorKind::overflow,
                  "calibrate: accumulator would exceed 62 bits");
  return plan;
}

struct PtqResult {
  std::vector<std::vector<std::int64_t>> hidden;  ///< T+1 code vectors, hidden[0] = 0
  std::vector<Vector> logits;
  std::size_t saturations = 0;
};

/// Input codes x̃ = rhe(x/α_i · 2^{p_i−1}), clamped to Q̄_{p_i−1}.
inline std::vector<std::int64_t> quantize_input(const PtqPlan& plan, std::span<const double> x,
                                                std::size_t* saturations = nullptr) {
  const auto f = plan.input_format();
  const double scale = std::ldexp(1.0, plan.p_i - 1) / plan.alpha_i;
  std::vector<std::int64_t> out(x.size());
  for (std::size_t j = 0; j < x.size(); ++j) {
    const double c = detail::round_half_even(x[j] * scale);
    const double cl = std::clamp(c, static_cast<double>(f.min_code()), static_cast<double>(f.max_code()));
    if (cl != c && saturations) ++*saturations;
    out[j] = static_cast<std::int64_t>(cl);
  }
  return out;
}

/// Integer-only recurrence; the output layer applies one float scale and b_o.
inline PtqResult ptq_forward(const PtqPlan& plan, const OrnnModel& m, const Matrix& inputs) {
  m.validate();
  const std::size_t n = m.d_h();
  const std::size_t T = inputs.rows();
  detail::require(T >= 1, ErrorKind::invalid_argument, "ptq_forward: empty sequence");
  detail::require(inputs.cols() == m.d_in(), ErrorKind::shape, "ptq_forward: input width mismatch");
  detail::require(plan.bias_codes.size() == n && plan.k == m.W.order.k(), ErrorKind::shape,
                  "ptq_forward: plan does not match the model");
  detail::require(plan.weight_quant == m.quant(), ErrorKind::invalid_argument,
                  "ptq_forward: plan was built for another weight quantizer");

  const auto qU = m.U.quantized();
  const auto qV = m.V.quantized();
  const auto hf = plan.hidden_format();
  const int frac_w = plan.p_a;
  const int frac_u = m.quant().frac_bits() + plan.p_i - 1;
  const int F = plan.requant.sum_frac;
  const double out_scale = plan.alpha_i * plan.alpha_U * plan.alpha_V * plan.alpha_h /
                           std::ldexp(1.0, m.quant().frac_bits() + plan.p_a - 1);

  PtqResult res;
  res.hidden.assign(1, std::vector<std::int64_t>(n, 0));
  res.hidden.reserve(T + 1);
  for (std::size_t t = 0; t < T; ++t) {
    const FxTensor h_prev(res.hidden.back(), hf);
    const FxTensor wh = recurrent_matvec(m.W, h_prev);
    const auto x = quantize_input(plan, inputs.row(t), &res.saturations);

    std::vector<std::int64_t> next(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::int64_t ux = 0;
      const std::int32_t* urow = qU.codes.data().data() + i * m.d_in();
      for (std::size_t j = 0; j < m.d_in(); ++j)
        if (x[j] != 0) ux += static_cast<std::int64_t>(urow[j]) * x[j];
      const std::int64_t sum = ((wh.values[i] << plan.n_h) << (F - frac_w)) + (ux << (F - frac_u));
      std::int64_t code = plan.bias_codes[i] + plan.requant(sum);
      if (code < hf.min_code() || code > hf.max_code()) {
        ++res.saturations;
        code = std::clamp(code, hf.min_code(), hf.max_code());
      }
      if (m.unit == Unit::relu) code = std::max<std::int64_t>(code, 0);
      next[i] = code;
    }
    res.hidden.push_back(std::move(next));

    const bool emit = m.mode == OutputMode::many_to_many || t + 1 == T;
    if (!emit) continue;
    const auto& h = res.hidden.back();
    Vector y(m.d_out());
    for (std::size_t o = 0; o < m.d_out(); ++o) {
      std::int64_t acc = 0;
      const std::int32_t* vrow = qV.codes.data().data() + o * n;
      for (std::size_t i = 0; i < n; ++i)
        if (h[i] > 0) acc += static_cast<std::int64_t>(vrow[i]) * h[i];
      y[o] = static_cast<double>(acc) * out_scale + m.b_o[o];
    }
    res.logits.push_back(std::move(y));
  }
  return res;
}

/// Decoded hidden state α_h · code / 2^{p_a−1}.
inline Vector decode_hidden(const PtqPlan& plan, std::span<const std::int64_t> codes) {
  Vector out(codes.size());
  const double s = plan.alpha_h / std::ldexp(1.0, plan.p_a - 1);
  for (std::size_t i = 0; i < codes.size(); ++i) out[i] = s * static_cast<double>(codes[i]);
  return out;
}

struct PtqComparison {
  std::size_t symbols = 0;
  std::size_t disagreements = 0;  ///< argmax(float) != argmax(fixed point)
  std::size_t saturations = 0;
  double fxp_cross_entropy = 0.0;
  double fxp_accuracy = 0.0;
  double disagreement_rate() const noexcept {
    return symbols ? static_cast<double>(disagreements) / static_cast<double>(symbols) : 0.0;
  }
};

/// Runs float and fixed-point inference side by side.
inline PtqComparison compare_ptq(const PtqPlan& plan, const OrnnModel& m, const Dataset& data,
                                 unsigned threads = 1) {
  detail::require(!data.empty(), ErrorKind::data, "compare_ptq: empty dataset");
  const auto w = effective_weights(m);
  struct Row {
    std::size_t dis = 0, hits = 0, sat = 0;
    double ce = 0.0;
  };
  std::vector<Row> rows(data.size());
  parallel_for(data.size(), threads, [&](std::size_t s) {
    const Matrix seq = data.sequence(s);
    const auto tgt = data.target(s);
    const auto fl = forward(m, w, seq);
    const auto fx = ptq_forward(plan, m, seq);
    Row r;
    r.sat = fx.saturations;
    for (std::size_t k = 0; k < fx.logits.size(); ++k) {
      const auto a = std::max_element(fl.logits[k].begin(), fl.logits[k].end()) - fl.logits[k].begin();
      const auto b = std::max_element(fx.logits[k].begin(), fx.logits[k].end()) - fx.logits[k].begin();
      r.dis += a != b ? 1 : 0;
      r.hits += static_cast<std::size_t>(b) == tgt[k] ? 1 : 0;
      const Vector p = softmax(fx.logits[k]);
      r.ce -= std::log(std::max(p[tgt[k]], 1e-300));
    }
    rows[s] = r;
  });
  PtqComparison c;
  double ce = 0.0;
  std::size_t hits = 0;
  for (const auto& r : rows) {
    c.disagreements += r.dis;
    c.saturations += r.sat;
    hits += r.hits;
    ce += r.ce;
  }
  c.symbols = data.size() * data.target_length();
  c.fxp_cross_entropy = ce / static_cast<double>(c.symbols);
  c.fxp_accuracy = static_cast<double>(hits) / static_cast<double>(c.symbols);
  return c;
}

}  // namespace hadamrnn
