#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hadamrnn/binary_io.hpp"
#include "hadamrnn/error.hpp"
#include "hadamrnn/fxp.hpp"
#include "hadamrnn/hadamard.hpp"
#include "hadamrnn/ornn.hpp"
#include "hadamrnn/quantizer.hpp"

namespace hadamrnn {

// Layout (little-endian):
//   "HDRN" u32 version
//   u64 d_h, d_in, d_out; u8 k; u64 q; u8 recurrent kind, unit, mode, activation
//   u8 weight-quant kind, u8 bits; u8 has column signs; u8 has plan
//   packed row signs [, packed column signs]
//   U, V: f64 α then codes (i8 or i16 by bit width), or raw f64 entries
//   b_i, b_o as f64
//   [plan]

inline constexpr std::uint32_t model_file_version = 1;

struct ModelFile {
  OrnnModel model;
  std::optional<PtqPlan> plan;
};

namespace detail {

inline int code_bytes(int bits) { return bits <= 8 ? 1 : 2; }

inline void put_dense(io::ByteWriter& w, const WeightMatrix& m) {
  if (!m.quant().quantized()) {
    for (double x : m.latent().data()) w.put(x);
    return;
  }
  const auto qd = m.quantized();
  w.put(qd.alpha);
  const int nb = code_bytes(qd.quant.storage_bits());
  for (auto c : qd.codes.data()) {
    if (nb == 1)
      w.put(static_cast<std::int8_t>(c));
    else
      w.put(static_cast<std::int16_t>(c));
  }
}

inline WeightMatrix get_dense(io::ByteReader& r, std::size_t rows, std::size_t cols, WeightQuant q) {
  if (!q.quantized()) {
    Matrix m(rows, cols);
    for (double& x : m.data()) x = r.get<double>();
    detail::require(all_finite(m.data()), ErrorKind::data, "model file: non-finite weight");
    return WeightMatrix(std::move(m), q);
  }
  QuantizedDense qd{CodeMatrix(rows, cols), r.get<double>(), q};
  detail::require(std::isfinite(qd.alpha) && qd.alpha > 0.0, ErrorKind::data,
                  "model file: scale must be positive");
  const int nb = code_bytes(q.storage_bits());
  const std::int32_t lo = q.kind == WeightQuant::Kind::ternary ? -1 : -(1 << (q.bits - 1));
  const std::int32_t hi = q.kind == WeightQuant::Kind::ternary ? 1 : (1 << (q.bits - 1)) - 1;
  for (auto& c : qd.codes.data()) {
    c = nb == 1 ? r.get<std::int8_t>() : r.get<std::int16_t>();
    detail::require(c >= lo && c <= hi, ErrorKind::data, "model file: weight code out of range");
  }
  return WeightMatrix::frozen(std::move(qd));
}

inline void put_plan(io::ByteWriter& w, const PtqPlan& p) {
  w.put(static_cast<std::int32_t>(p.p_a));
  w.put(static_cast<std::int32_t>(p.p_i));
  w.put(p.alpha_U);
  w.put(p.alpha_V);
  w.put(p.alpha_W);
  w.put(p.alpha_i);
  w.put(p.alpha_h);
  w.put(static_cast<std::int32_t>(p.n_h));
  w.put(p.max_h);
  w.put(static_cast<std::int32_t>(p.k));
  w.put(static_cast<std::int32_t>(p.requant.sum_frac));
  w.put(static_cast<std::int32_t>(p.requant.grid_frac));
  w.put(static_cast<std::int32_t>(p.requant.exponent));
  w.put(static_cast<std::uint8_t>(p.requant.sqrt2));
  w.put(static_cast<std::int32_t>(p.accumulator_bits));
  w.put_array<std::int64_t>(p.bias_codes);
}

inline PtqPlan get_plan(io::ByteReader& r, WeightQuant q) {
  PtqPlan p;
  p.weight_quant = q;
  p.p_a = r.get<std::int32_t>();
  p.p_i = r.get<std::int32_t>();
  detail::require(p.p_a >= 1 && p.p_a <= 30 && p.p_i >= 1 && p.p_i <= 30, ErrorKind::data,
                  "model file: plan bit widths out of range");
  p.alpha_U = r.get<double>();
  p.alpha_V = r.get<double>();
  p.alpha_W = r.get<double>();
  p.alpha_i = r.get<double>();
  p.alpha_h = r.get<double>();
  p.n_h = r.get<std::int32_t>();
  p.max_h = r.get<double>();
  p.k = r.get<std::int32_t>();
  p.requant.sum_frac = r.get<std::int32_t>();
  p.requant.grid_frac = r.get<std::int32_t>();
  p.requant.exponent = r.get<std::int32_t>();
  p.requant.sqrt2 = r.get<std::uint8_t>() != 0;
  p.accumulator_bits = r.get<std::int32_t>();
  p.bias_codes = r.get_array<std::int64_t>();
  detail::require(p.consistent(), ErrorKind::data, "model file: plan scales are inconsistent");
  return p;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_model(const ModelFile& f) {
  const OrnnModel& m = f.model;
  m.validate();
  io::ByteWriter w;
  w.put_tag("HDRN");
  w.put(model_file_version);
  w.put(static_cast<std::uint64_t>(m.d_h()));
  w.put(static_cast<std::uint64_t>(m.d_in()));
  w.put(static_cast<std::uint64_t>(m.d_out()));
  w.put(static_cast<std::uint8_t>(m.W.order.k()));
  w.put(static_cast<std::uint64_t>(m.W.q));
  w.put(static_cast<std::uint8_t>(m.W.kind));
  w.put(static_cast<std::uint8_t>(m.unit));
  w.put(static_cast<std::uint8_t>(m.mode));
  w.put(static_cast<std::uint8_t>(m.activation));
  w.put(static_cast<std::uint8_t>(m.quant().kind));
  w.put(static_cast<std::uint8_t>(m.quant().bits));
  w.put(static_cast<std::uint8_t>(m.W.col_signs.has_value()));
  w.put(static_cast<std::uint8_t>(f.plan.has_value()));
  w.put_bytes(m.W.row_signs.pack_bits());
  if (m.W.col_signs) w.put_bytes(m.W.col_signs->pack_bits());
  detail::put_dense(w, m.U);
  detail::put_dense(w, m.V);
  for (double x : m.b_i) w.put(x);
  for (double x : m.b_o) w.put(x);
  if (f.plan) detail::put_plan(w, *f.plan);
  return w.bytes();
}

inline ModelFile decode_model(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  r.expect_tag("HDRN", "model file");
  const auto version = r.get<std::uint32_t>();
  detail::require(version == model_file_version, ErrorKind::data,
                  "model file: unsupported version " + std::to_string(version));
  const auto d_h = r.get<std::uint64_t>();
  const auto d_in = r.get<std::uint64_t>();
  const auto d_out = r.get<std::uint64_t>();
  const auto k = r.get<std::uint8_t>();
  const auto q = r.get<std::uint64_t>();
  const auto kind = r.get<std::uint8_t>();
  const auto unit = r.get<std::uint8_t>();
  const auto mode = r.get<std::uint8_t>();
  const auto act = r.get<std::uint8_t>();
  const auto qkind = r.get<std::uint8_t>();
  const auto qbits = r.get<std::uint8_t>();
  const auto has_col = r.get<std::uint8_t>();
  const auto has_plan = r.get<std::uint8_t>();
  detail::require(kind <= 1 && unit <= 1 && mode <= 1 && act <= 1 && qkind <= 2 && has_col <= 1 &&
                      has_plan <= 1,
                  ErrorKind::data, "model file: bad enum value");
  detail::require(k >= 1 && k <= SylvesterOrder::max_order && q >= 1 && q <= (1u << 20) &&
                      d_h == q * (std::uint64_t{1} << k),
                  ErrorKind::data, "model file: d_h does not match q·2^k");
  detail::require(d_in >= 1 && d_out >= 1 && d_in <= (1u << 24) && d_out <= (1u << 24),
                  ErrorKind::data, "model file: bad input/output size");
  detail::require(d_h * (d_in + d_out) <= r.remaining(), ErrorKind::data,
                  "model file: payload shorter than header dims");

  WeightQuant wq;
  switch (static_cast<WeightQuant::Kind>(qkind)) {
    case WeightQuant::Kind::full_precision: wq = WeightQuant::full(); break;
    case WeightQuant::Kind::ternary: wq = WeightQuant::ternary(); break;
    case WeightQuant::Kind::uniform:
      detail::require(qbits >= 2 && qbits <= 16, ErrorKind::data, "model file: bad bit width");
      wq = WeightQuant::uniform(qbits);
      break;
  }

  ModelFile f;
  OrnnModel& m = f.model;
  const std::size_t packed = (d_h + 7) / 8;
  auto row = SignVector::unpack_bits(r.get_bytes(packed), d_h);
  m.W = make_recurrent(static_cast<RecurrentKind>(kind), SylvesterOrder(k), q, std::move(row));
  if (has_col) m.W = switch_columns(m.W, SignVector::unpack_bits(r.get_bytes(packed), d_h));
  m.U = detail::get_dense(r, d_h, d_in, wq);
  m.V = detail::get_dense(r, d_out, d_h, wq);
  m.b_i.resize(d_h);
  m.b_o.resize(d_out);
  for (double& x : m.b_i) x = r.get<double>();
  for (double& x : m.b_o) x = r.get<double>();
  m.unit = static_cast<Unit>(unit);
  m.mode = static_cast<OutputMode>(mode);
  m.activation = static_cast<OutputActivation>(act);
  if (has_plan) {
    f.plan = detail::get_plan(r, wq);
    detail::require(f.plan->bias_codes.size() == d_h && f.plan->k == k, ErrorKind::data,
                    "model file: plan does not match the model");
  }
  detail::require(r.at_end(), ErrorKind::data, "model file: trailing bytes");
  m.validate();
  return f;
}

inline void save_model(const std::string& path, const ModelFile& f) {
  io::write_file(path, encode_model(f));
}

inline ModelFile load_model(const std::string& path) { return decode_model(io::read_file(path)); }

}  // namespace hadamrnn
