#pragma once

#include <cmath>
#include <cstdint>
#include <ostream>
#include <random>
#include <vector>

#include "hadamrnn/error.hpp"
#include "hadamrnn/hadamard.hpp"
#include "hadamrnn/matrix.hpp"
#include "hadamrnn/ornn.hpp"
#include "hadamrnn/quantizer.hpp"
#include "hadamrnn/rng.hpp"

namespace hadamrnn {

// ---------------------------------------------------------------------------
// Linear vs ReLU memorization

struct MemorizationCurves {
  std::vector<double> e_lin, f_lin, e_relu, f_relu;  ///< index t−1 for t = 1..T
};

/// Hidden-only network with W = H/√d_h, all-ones signs, b_i = 0 and the given U.
inline OrnnModel memorization_model(const Matrix& U, Unit unit) {
  const std::size_t n = U.rows();
  detail::require(n >= 2 && (n & (n - 1)) == 0, ErrorKind::invalid_argument,
                  "memorization: d_h must be a power of two >= 2");
  OrnnModel m;
  m.W = make_recurrent_ones(RecurrentKind::binary, std::countr_zero(n), 1);
  m.U = WeightMatrix(U, WeightQuant::full());
  m.V = WeightMatrix(Matrix(1, n), WeightQuant::full());
  m.b_i.assign(n, 0.0);
  m.b_o.assign(1, 0.0);
  m.unit = unit;
  m.mode = OutputMode::many_to_one;
  return m;
}

/// One seed: 2-d Gaussian random walk inputs, U ~ N(0, 1), unit perturbations
/// z along each axis at every t.
inline MemorizationCurves memorization_run(std::size_t d_h, std::size_t T, std::uint64_t seed,
                                           double z_scale = 1.0) {
  detail::require(T >= 1, ErrorKind::invalid_argument, "memorization: T must be >= 1");
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix U(d_h, 2);
  for (double& x : U.data()) x = normal(rng);
  Matrix x(T, 2);
  double a = 0.0, b = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    a += normal(rng);
    b += normal(rng);
    x(t, 0) = a;
    x(t, 1) = b;
  }
  const auto lin = memorization_model(U, Unit::linear);
  const auto rel = memorization_model(U, Unit::relu);
  const Vector e1{z_scale, 0.0};
  const Vector e2{0.0, z_scale};
  MemorizationCurves c;
  for (std::size_t t = 1; t <= T; ++t) {
    c.e_lin.push_back(perturbation_response(lin, x, t, e1));
    c.f_lin.push_back(perturbation_response(lin, x, t, e2));
    c.e_relu.push_back(perturbation_response(rel, x, t, e1));
    c.f_relu.push_back(perturbation_response(rel, x, t, e2));
  }
  return c;
}

/// Curves averaged over seeds.
inline MemorizationCurves memorization_sweep(std::size_t d_h, std::size_t T,
                                             const std::vector<std::uint64_t>& seeds,
                                             double z_scale = 1.0, unsigned threads = 1) {
  detail::require(!seeds.empty(), ErrorKind::invalid_argument, "memorization: no seeds");
  std::vector<MemorizationCurves> runs(seeds.size());
  parallel_for(seeds.size(), threads,
               [&](std::size_t i) { runs[i] = memorization_run(d_h, T, seeds[i], z_scale); });
  MemorizationCurves avg{Vector(T, 0.0), Vector(T, 0.0), Vector(T, 0.0), Vector(T, 0.0)};
  for (const auto& r : runs)
    for (std::size_t t = 0; t < T; ++t) {
      avg.e_lin[t] += r.e_lin[t];
      avg.f_lin[t] += r.f_lin[t];
      avg.e_relu[t] += r.e_relu[t];
      avg.f_relu[t] += r.f_relu[t];
    }
  const double inv = 1.0 / static_cast<double>(seeds.size());
  for (auto* v : {&avg.e_lin, &avg.f_lin, &avg.e_relu, &avg.f_relu})
    for (double& x : *v) x *= inv;
  return avg;
}

/// Standard deviation over mean (population); 0 for a zero-mean curve.
inline double coefficient_of_variation(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (mean == 0.0) return 0.0;
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(v.size());
  return std::sqrt(var) / std::abs(mean);
}

/// max_t |v_t − v_1| / |v_1|
inline double max_relative_deviation(const std::vector<double>& v) {
  if (v.empty() || v.front() == 0.0) return 0.0;
  double d = 0.0;
  for (double x : v) d = std::max(d, std::abs(x - v.front()));
  return d / std::abs(v.front());
}

inline void write_memorization_csv(std::ostream& out, const MemorizationCurves& c) {
  out << "t,e_lin,f_lin,e_relu,f_relu\n";
  out.precision(17);
  for (std::size_t t = 0; t < c.e_lin.size(); ++t)
    out << (t + 1) << ',' << c.e_lin[t] << ',' << c.f_lin[t] << ',' << c.e_relu[t] << ','
        << c.f_relu[t] << '\n';
}

// ---------------------------------------------------------------------------
// Block size trade-off

struct TradeoffInput {
  ModelShape shape;
  WeightQuant quant;
  double metric = 0.0;
};

struct TradeoffRow {
  std::size_t q = 1;
  double metric = 0.0;
  std::uint64_t recurrent_additions = 0;
  double size_kb = 0.0;
};

inline std::vector<TradeoffRow> tradeoff_table(const std::vector<TradeoffInput>& configs) {
  std::vector<TradeoffRow> rows;
  rows.reserve(configs.size());
  for (const auto& c : configs) {
    detail::require(c.shape.q >= 1 && c.shape.d_h % c.shape.q == 0, ErrorKind::invalid_argument,
                    "tradeoff_table: q must divide d_h");
    rows.push_back({c.shape.q, c.metric, op_count_report(c.shape, c.quant).recurrent.additions,
                    model_size_bits(c.shape, c.quant).core_kb()});
  }
  return rows;
}

}  // namespace hadamrnn
