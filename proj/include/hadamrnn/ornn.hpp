#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <thread>
#include <vector>

#include "hadamrnn/error.hpp"
#include "hadamrnn/hadamard.hpp"
#include "hadamrnn/matrix.hpp"
#include "hadamrnn/quantizer.hpp"

namespace hadamrnn {

enum class Unit : std::uint8_t { linear = 0, relu = 1 };
enum class OutputMode : std::uint8_t { many_to_one = 0, many_to_many = 1 };
enum class OutputActivation : std::uint8_t { identity = 0, softmax = 1 };

/// Input or output matrix: a latent real matrix viewed through its quantizer,
/// or a frozen code matrix loaded from disk.
class WeightMatrix {
 public:
  WeightMatrix() = default;
  WeightMatrix(Matrix latent, WeightQuant quant) : latent_(std::move(latent)), quant_(quant) {}

  static WeightMatrix frozen(QuantizedDense q) {
    WeightMatrix w(q.decode(), q.quant);
    w.frozen_ = std::move(q);
    return w;
  }

  std::size_t rows() const noexcept { return latent_.rows(); }
  std::size_t cols() const noexcept { return latent_.cols(); }
  const Matrix& latent() const noexcept { return latent_; }
  WeightQuant quant() const noexcept { return quant_; }
  bool is_frozen() const noexcept { return frozen_.has_value(); }

  /// Replacing the latent drops any frozen codes.
  void set_latent(Matrix m) {
    detail::require(m.rows() == latent_.rows() && m.cols() == latent_.cols(), ErrorKind::shape,
                    "weight matrix: latent shape changed");
    latent_ = std::move(m);
    frozen_.reset();
  }

  QuantizedDense quantized() const {
    if (frozen_) return *frozen_;
    return quantize(latent_, quant_);
  }

  /// The matrix the forward pass multiplies with.
  Matrix effective() const {
    if (!quant_.quantized()) return latent_;
    return quantized().decode();
  }

 private:
  Matrix latent_;
  WeightQuant quant_;
  std::optional<QuantizedDense> frozen_;
};

struct OrnnModel {
  WeightMatrix U;  ///< d_h × d_in
  RecurrentParam W;
  WeightMatrix V;  ///< d_out × d_h
  Vector b_i;
  Vector b_o;
  Unit unit = Unit::linear;
  OutputMode mode = OutputMode::many_to_many;
  OutputActivation activation = OutputActivation::identity;

  std::size_t d_h() const noexcept { return W.size(); }
  std::size_t d_in() const noexcept { return U.cols(); }
  std::size_t d_out() const noexcept { return V.rows(); }
  WeightQuant quant() const noexcept { return U.quant(); }

  ModelShape shape() const {
    return {d_h(), d_in(), d_out(), W.q, W.col_signs.has_value()};
  }

  void validate() const {
    const std::size_t n = d_h();
    detail::require(U.rows() == n, ErrorKind::shape, "U must have d_h rows");
    detail::require(V.cols() == n, ErrorKind::shape, "V must have d_h columns");
    detail::require(b_i.size() == n, ErrorKind::shape, "b_i must have length d_h");
    detail::require(b_o.size() == d_out(), ErrorKind::shape, "b_o must have length d_out");
    detail::require(W.row_signs.size() == n, ErrorKind::shape, "row signs must have length d_h");
    detail::require(U.quant() == V.quant(), ErrorKind::invalid_argument,
                    "U and V must share one quantizer");
  }
};

/// U and V as used by the forward pass, computed once per batch.
struct EffectiveWeights {
  Matrix U;
  Matrix V;
};

inline EffectiveWeights effective_weights(const OrnnModel& m) {
  return {m.U.effective(), m.V.effective()};
}

/// h_0..h_T plus what backpropagation needs.
struct HiddenTrace {
  std::vector<Vector> states;       ///< T+1 entries, states[0] = 0
  std::vector<Vector> pre;          ///< relu unit: pre-activations s_1..s_T
  std::vector<Vector> unsigned_rec; ///< scale·(I⊗H)(c ⊙ h_{t-1}), t = 1..T (when kept)
};

struct ForwardResult {
  HiddenTrace trace;
  std::vector<Vector> logits;  ///< one per emitted step
};

inline double relu(double x) noexcept { return x > 0.0 ? x : 0.0; }

/// Runs the recurrence on one sequence (rows = timesteps, cols = d_in).
inline ForwardResult forward(const OrnnModel& m, const EffectiveWeights& w,
                             const Matrix& inputs, bool keep_unsigned = false) {
  const std::size_t T = inputs.rows();
  const std::size_t n = m.d_h();
  detail::require(T >= 1, ErrorKind::invalid_argument, "forward: empty sequence");
  detail::require(inputs.cols() == m.d_in(), ErrorKind::shape,
                  "forward: input width must equal d_in");
  detail::require(all_finite(inputs.data()), ErrorKind::numerical, "forward: non-finite input");

  ForwardResult r;
  auto& tr = r.trace;
  tr.states.assign(1, Vector(n, 0.0));
  tr.states.reserve(T + 1);
  if (m.unit == Unit::relu) tr.pre.reserve(T);
  if (keep_unsigned) tr.unsigned_rec.reserve(T);

  Vector z(n);
  Vector act(n);
  const auto& r_signs = m.W.row_signs.signs();
  for (std::size_t t = 0; t < T; ++t) {
    apply_unsigned(m.W, tr.states.back(), z);
    Vector s(n);
    for (std::size_t i = 0; i < n; ++i) s[i] = r_signs[i] * z[i] + m.b_i[i];
    matvec_accumulate_sparse_x(w.U, inputs.row(t), s);
    if (keep_unsigned) tr.unsigned_rec.push_back(z);

    if (m.unit == Unit::relu) {
      Vector h(n);
      for (std::size_t i = 0; i < n; ++i) h[i] = relu(s[i]);
      tr.pre.push_back(std::move(s));
      tr.states.push_back(std::move(h));
    } else {
      tr.states.push_back(std::move(s));
    }

    const bool emit = m.mode == OutputMode::many_to_many || t + 1 == T;
    if (!emit) continue;
    const Vector& h = tr.states.back();
    if (m.unit == Unit::linear) {
      for (std::size_t i = 0; i < n; ++i) act[i] = relu(h[i]);
    } else {
      act = h;
    }
    Vector y = matvec(w.V, act);
    for (std::size_t o = 0; o < y.size(); ++o) y[o] += m.b_o[o];
    r.logits.push_back(std::move(y));
  }
  return r;
}

inline ForwardResult forward(const OrnnModel& m, const Matrix& inputs) {
  m.validate();
  return forward(m, effective_weights(m), inputs);
}

inline Vector softmax(std::span<const double> logits) {
  Vector p(logits.begin(), logits.end());
  const double mx = *std::max_element(p.begin(), p.end());
  double sum = 0.0;
  for (double& x : p) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (double& x : p) x /= sum;
  return p;
}

/// Evaluation-time output: logits, or probabilities when the head is softmax.
inline Vector apply_output_activation(const OrnnModel& m, std::span<const double> logits) {
  if (m.activation == OutputActivation::softmax) return softmax(logits);
  return Vector(logits.begin(), logits.end());
}

/// Runs independent sequences on up to `threads` workers. Each element is
/// computed by exactly one worker, so results do not depend on the count.
template <typename Fn>
void parallel_for(std::size_t count, unsigned threads, Fn&& fn) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(count)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (unsigned w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < count; i += threads) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline std::vector<ForwardResult> forward_batch(const OrnnModel& m, std::span<const Matrix> batch,
                                                unsigned threads = 1) {
  m.validate();
  const auto w = effective_weights(m);
  const std::size_t T = batch.empty() ? 0 : batch.front().rows();
  for (const auto& seq : batch)
    detail::require(seq.rows() == T, ErrorKind::shape, "forward_batch: ragged batch");
  std::vector<ForwardResult> out(batch.size());
  parallel_for(batch.size(), threads, [&](std::size_t i) { out[i] = forward(m, w, batch[i]); });
  return out;
}

/// ‖h_T(x) − h_T(x with x_t += z)‖₂, t is 1-based.
inline double perturbation_response(const OrnnModel& m, const Matrix& inputs, std::size_t t,
                                    std::span<const double> z) {
  detail::require(t >= 1 && t <= inputs.rows(), ErrorKind::invalid_argument,
                  "perturbation_response: step index out of range");
  detail::require(z.size() == m.d_in(), ErrorKind::shape,
                  "perturbation_response: perturbation width must equal d_in");
  m.validate();
  const auto w = effective_weights(m);
  const auto base = forward(m, w, inputs);
  Matrix perturbed = inputs;
  for (std::size_t j = 0; j < z.size(); ++j) perturbed(t - 1, j) += z[j];
  const auto moved = forward(m, w, perturbed);
  const Vector& a = base.trace.states.back();
  const Vector& b = moved.trace.states.back();
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace hadamrnn
