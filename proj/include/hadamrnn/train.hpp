#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hadamrnn/datasets.hpp"
#include "hadamrnn/error.hpp"
#include "hadamrnn/hadamard.hpp"
#include "hadamrnn/matrix.hpp"
#include "hadamrnn/ornn.hpp"
#include "hadamrnn/quantizer.hpp"
#include "hadamrnn/rng.hpp"

namespace hadamrnn {

// ---------------------------------------------------------------------------
// Initialization

/// Entries uniform on ±√(6 / (rows + cols)).
inline Matrix glorot_init(std::size_t rows, std::size_t cols, Rng& rng) {
  detail::require(rows >= 1 && cols >= 1, ErrorKind::invalid_argument,
                  "glorot_init: dimensions must be >= 1");
  const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(rows, cols);
  for (double& x : m.data()) x = dist(rng);
  return m;
}

struct ModelConfig {
  std::size_t hidden = 64;
  RecurrentKind kind = RecurrentKind::binary;
  std::size_t q = 1;
  Unit unit = Unit::linear;
  WeightQuant quant = WeightQuant::uniform(4);
  bool column_signs = false;
  OutputActivation activation = OutputActivation::softmax;
  /// Latent sign entries start at ±this value with random signs.
  double sign_init = 1.0;
};

/// Sylvester order k such that hidden = q · 2^k.
inline SylvesterOrder order_for(std::size_t hidden, std::size_t q) {
  detail::require(q >= 1 && hidden % q == 0, ErrorKind::invalid_argument,
                  "hidden size must be a multiple of q");
  const std::size_t block = hidden / q;
  detail::require(block >= 2 && (block & (block - 1)) == 0, ErrorKind::invalid_argument,
                  "hidden / q must be a power of two >= 2");
  return SylvesterOrder(std::countr_zero(block));
}

inline OrnnModel init_model(const ModelConfig& cfg, std::size_t d_in, std::size_t d_out,
                            OutputMode mode, std::uint64_t seed) {
  const auto order = order_for(cfg.hidden, cfg.q);
  detail::require(cfg.kind == RecurrentKind::block_ternary || cfg.q == 1,
                  ErrorKind::invalid_argument, "binary recurrent weights require q = 1");
  Rng rng(seed);
  auto random_signs = [&] {
    Vector latent(cfg.hidden);
    for (double& x : latent) x = (rng() & 1u) ? cfg.sign_init : -cfg.sign_init;
    return SignVector::from_latent(std::move(latent));
  };
  OrnnModel m;
  m.W = make_recurrent(cfg.kind, order, cfg.q, random_signs());
  if (cfg.column_signs) m.W = switch_columns(m.W, random_signs());
  m.U = WeightMatrix(glorot_init(cfg.hidden, d_in, rng), cfg.quant);
  m.V = WeightMatrix(glorot_init(d_out, cfg.hidden, rng), cfg.quant);
  m.b_i.assign(cfg.hidden, 0.0);
  m.b_o.assign(d_out, 0.0);
  m.unit = cfg.unit;
  m.mode = mode;
  m.activation = cfg.activation;
  return m;
}

// ---------------------------------------------------------------------------
// Flat parameter layout: [row signs | col signs | U | V | b_i | b_o]

struct ParamLayout {
  static constexpr std::size_t absent = std::numeric_limits<std::size_t>::max();

  std::size_t row_signs = 0;
  std::size_t col_signs = absent;
  std::size_t U = 0;
  std::size_t V = 0;
  std::size_t b_i = 0;
  std::size_t b_o = 0;
  std::size_t total = 0;
  std::size_t d_h = 0;

  static ParamLayout of(const OrnnModel& m) {
    ParamLayout l;
    l.d_h = m.d_h();
    std::size_t off = l.d_h;
    if (m.W.col_signs) {
      l.col_signs = off;
      off += l.d_h;
    }
    l.U = off;
    off += m.U.rows() * m.U.cols();
    l.V = off;
    off += m.V.rows() * m.V.cols();
    l.b_i = off;
    off += m.b_i.size();
    l.b_o = off;
    off += m.b_o.size();
    l.total = off;
    return l;
  }

  bool has_col_signs() const noexcept { return col_signs != absent; }
};

inline Vector flatten_latents(const OrnnModel& m) {
  const auto l = ParamLayout::of(m);
  Vector p(l.total);
  std::copy(m.W.row_signs.latent().begin(), m.W.row_signs.latent().end(), p.begin());
  if (l.has_col_signs())
    std::copy(m.W.col_signs->latent().begin(), m.W.col_signs->latent().end(), p.begin() + l.col_signs);
  std::copy(m.U.latent().data().begin(), m.U.latent().data().end(), p.begin() + l.U);
  std::copy(m.V.latent().data().begin(), m.V.latent().data().end(), p.begin() + l.V);
  std::copy(m.b_i.begin(), m.b_i.end(), p.begin() + l.b_i);
  std::copy(m.b_o.begin(), m.b_o.end(), p.begin() + l.b_o);
  return p;
}

/// Writes latents back and refreshes the binarized sign views.
inline void assign_latents(OrnnModel& m, std::span<const double> p) {
  const auto l = ParamLayout::of(m);
  detail::require(p.size() == l.total, ErrorKind::shape, "latent vector length mismatch");
  auto seg = [&](std::size_t off, std::size_t n) { return Vector(p.begin() + off, p.begin() + off + n); };
  m.W.row_signs = SignVector::from_latent(seg(l.row_signs, l.d_h));
  if (l.has_col_signs()) m.W.col_signs = SignVector::from_latent(seg(l.col_signs, l.d_h));
  m.U.set_latent(Matrix(m.U.rows(), m.U.cols(), seg(l.U, m.U.rows() * m.U.cols())));
  m.V.set_latent(Matrix(m.V.rows(), m.V.cols(), seg(l.V, m.V.rows() * m.V.cols())));
  m.b_i = seg(l.b_i, m.b_i.size());
  m.b_o = seg(l.b_o, m.b_o.size());
}

// ---------------------------------------------------------------------------
// Loss

/// −log softmax(logits)[target]
inline double cross_entropy(std::span<const double> logits, std::size_t target) {
  detail::require(target < logits.size(), ErrorKind::invalid_argument,
                  "cross_entropy: class index out of range");
  detail::require(all_finite(logits), ErrorKind::numerical, "cross_entropy: non-finite logits");
  double mx = logits[0];
  for (double x : logits) mx = std::max(mx, x);
  double sum = 0.0;
  for (double x : logits) sum += std::exp(x - mx);
  return std::log(sum) + mx - logits[target];
}

/// Mean cross-entropy over all (sequence, step) pairs.
inline double loss_xent(std::span<const Vector> logits, std::span<const std::size_t> targets) {
  detail::require(logits.size() == targets.size() && !logits.empty(), ErrorKind::shape,
                  "loss_xent: logits and targets differ in length");
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) s += cross_entropy(logits[i], targets[i]);
  return s / static_cast<double>(logits.size());
}

// ---------------------------------------------------------------------------
// Backpropagation through time

/// Summed loss of one sequence and its gradient, accumulated into `grad`.
/// Gradients are taken at the binarized / quantized weights and assigned to
/// the latents unchanged (straight-through).
inline double sequence_loss_grad(const OrnnModel& m, const EffectiveWeights& w,
                                 const ParamLayout& l, const Matrix& inputs,
                                 std::span<const std::uint8_t> targets, std::span<double> grad) {
  const auto fw = forward(m, w, inputs, /*keep_unsigned=*/true);
  const auto& tr = fw.trace;
  const std::size_t T = inputs.rows();
  const std::size_t n = m.d_h();
  const std::size_t d_in = m.d_in();
  const std::size_t d_out = m.d_out();
  const bool many = m.mode == OutputMode::many_to_many;
  detail::require(targets.size() == (many ? T : 1), ErrorKind::shape,
                  "target length does not match output mode");

  double loss = 0.0;
  Vector carry(n, 0.0);
  Vector dh(n);
  Vector ds(n);
  Vector g(n);
  Vector act(n);
  const auto& r = m.W.row_signs.signs();
  const double scale = m.W.scale();

  for (std::size_t t = T; t-- > 0;) {
    dh = carry;
    const Vector& h = tr.states[t + 1];
    const bool emitted = many || t + 1 == T;
    if (emitted) {
      const Vector& y = fw.logits[many ? t : 0];
      const std::size_t target = targets[many ? t : 0];
      loss += cross_entropy(y, target);
      Vector dy = softmax(y);
      dy[target] -= 1.0;
      if (m.unit == Unit::linear)
        for (std::size_t i = 0; i < n; ++i) act[i] = relu(h[i]);
      else
        act = h;
      for (std::size_t o = 0; o < d_out; ++o) {
        grad[l.b_o + o] += dy[o];
        double* gv = grad.data() + l.V + o * n;
        for (std::size_t i = 0; i < n; ++i) gv[i] += dy[o] * act[i];
      }
      Vector da(n, 0.0);
      matvec_transpose_accumulate(w.V, dy, da);
      if (m.unit == Unit::linear)
        for (std::size_t i = 0; i < n; ++i) dh[i] += h[i] > 0.0 ? da[i] : 0.0;
      else
        for (std::size_t i = 0; i < n; ++i) dh[i] += da[i];
    }

    if (m.unit == Unit::relu) {
      const Vector& s = tr.pre[t];
      for (std::size_t i = 0; i < n; ++i) ds[i] = s[i] > 0.0 ? dh[i] : 0.0;
    } else {
      ds = dh;
    }

    const auto x = inputs.row(t);
    for (std::size_t j = 0; j < d_in; ++j) {
      const double xj = x[j];
      if (xj == 0.0) continue;
      for (std::size_t i = 0; i < n; ++i) grad[l.U + i * d_in + j] += ds[i] * xj;
    }
    const Vector& z = tr.unsigned_rec[t];
    for (std::size_t i = 0; i < n; ++i) {
      grad[l.b_i + i] += ds[i];
      grad[l.row_signs + i] += ds[i] * z[i];
    }

    // g = scale · (I⊗H)(r ⊙ ds); Wᵀ ds = c ⊙ g.
    for (std::size_t i = 0; i < n; ++i) g[i] = r[i] * ds[i];
    block_hadamard_inplace<double>(g, m.W.order);
    for (double& v : g) v *= scale;
    if (l.has_col_signs()) {
      const Vector& h_prev = tr.states[t];
      const auto& c = m.W.col_signs->signs();
      for (std::size_t j = 0; j < n; ++j) {
        grad[l.col_signs + j] += h_prev[j] * g[j];
        carry[j] = c[j] * g[j];
      }
    } else {
      carry = g;
    }
  }
  return loss;
}

/// Sums vectors[lo, hi) pairwise in index order into vectors[lo].
inline void pairwise_sum(std::vector<Vector>& vs, std::size_t lo, std::size_t hi) {
  if (hi - lo <= 1) return;
  const std::size_t mid = lo + (hi - lo) / 2;
  pairwise_sum(vs, lo, mid);
  pairwise_sum(vs, mid, hi);
  auto& a = vs[lo];
  const auto& b = vs[mid];
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

struct BatchGradient {
  Vector grad;   ///< gradient of the mean loss, flat layout
  double loss = 0.0;  ///< mean over sequences and emitted steps
};

/// Mean-loss gradient over the listed samples of `data`. Per-sample gradients
/// are reduced by a fixed pairwise tree, so the result does not depend on `threads`.
inline BatchGradient bptt_grads(const OrnnModel& m, const Dataset& data,
                                std::span<const std::size_t> indices, unsigned threads = 1) {
  detail::require(!indices.empty(), ErrorKind::invalid_argument, "bptt_grads: empty batch");
  detail::require(data.d_in == m.d_in(), ErrorKind::shape, "bptt_grads: dataset width != d_in");
  m.validate();
  const auto w = effective_weights(m);
  const auto l = ParamLayout::of(m);
  std::vector<Vector> grads(indices.size());
  std::vector<double> losses(indices.size());
  parallel_for(indices.size(), threads, [&](std::size_t k) {
    grads[k].assign(l.total, 0.0);
    losses[k] = sequence_loss_grad(m, w, l, data.sequence(indices[k]), data.target(indices[k]),
                                   grads[k]);
  });
  pairwise_sum(grads, 0, grads.size());
  const double denom = static_cast<double>(indices.size() * data.target_length());
  BatchGradient out;
  out.grad = std::move(grads[0]);
  for (double& x : out.grad) x /= denom;
  double total = 0.0;
  for (double x : losses) total += x;
  out.loss = total / denom;
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct TrainConfig {
  double lr = 1e-3;
  double decay = 0.98;  ///< per-epoch multiplicative factor
  std::size_t batch_size = 128;
  std::size_t epochs = 10;
  std::uint64_t seed = 1;
  bool latent_clip = true;  ///< clip sign latents to [-1, 1] after each step
  std::optional<double> grad_clip;  ///< global-norm clip
  unsigned threads = 1;
  AdamConfig adam;

  void validate() const {
    detail::require(lr >= 0.0 && std::isfinite(lr), ErrorKind::config, "lr must be >= 0");
    detail::require(decay > 0.0 && decay <= 1.0, ErrorKind::config, "decay must be in (0, 1]");
    detail::require(batch_size >= 1, ErrorKind::config, "batch_size must be >= 1");
    detail::require(!grad_clip || *grad_clip > 0.0, ErrorKind::config, "grad_clip must be > 0");
  }
};

struct TrainState {
  Vector params;  ///< flat latents
  Vector m;
  Vector v;
  std::uint64_t step = 0;
  ParamLayout layout;

  static TrainState from_model(const OrnnModel& model) {
    TrainState s;
    s.layout = ParamLayout::of(model);
    s.params = flatten_latents(model);
    s.m.assign(s.params.size(), 0.0);
    s.v.assign(s.params.size(), 0.0);
    return s;
  }
};

inline double lr_schedule(std::size_t epoch, const TrainConfig& cfg) {
  return cfg.lr * std::pow(cfg.decay, static_cast<double>(epoch));
}

inline void clip_global_norm(Vector& g, double max_norm) {
  const double nrm = norm2(g);
  if (nrm > max_norm) {
    const double f = max_norm / nrm;
    for (double& x : g) x *= f;
  }
}

/// One Adam update on the flat latents.
inline void adam_step(TrainState& s, std::span<const double> grad, double lr,
                      const TrainConfig& cfg) {
  detail::require(grad.size() == s.params.size(), ErrorKind::shape, "adam_step: gradient shape");
  ++s.step;
  const auto& a = cfg.adam;
  const double bc1 = 1.0 - std::pow(a.beta1, static_cast<double>(s.step));
  const double bc2 = 1.0 - std::pow(a.beta2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < s.params.size(); ++i) {
    const double gi = grad[i];
    s.m[i] = a.beta1 * s.m[i] + (1.0 - a.beta1) * gi;
    s.v[i] = a.beta2 * s.v[i] + (1.0 - a.beta2) * gi * gi;
    const double mh = s.m[i] / bc1;
    const double vh = s.v[i] / bc2;
    s.params[i] -= lr * mh / (std::sqrt(vh) + a.epsilon);
  }
  if (cfg.latent_clip) {
    auto clip = [&](std::size_t off) {
      for (std::size_t i = off; i < off + s.layout.d_h; ++i)
        s.params[i] = std::clamp(s.params[i], -1.0, 1.0);
    };
    clip(s.layout.row_signs);
    if (s.layout.has_col_signs()) clip(s.layout.col_signs);
  }
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  double cross_entropy = 0.0;  ///< mean per emitted step
  double accuracy = 0.0;       ///< argmax accuracy per emitted step
  std::size_t symbols = 0;
};

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

inline EvalResult evaluate(const OrnnModel& m, const Dataset& data, unsigned threads = 1) {
  detail::require(!data.empty(), ErrorKind::data, "evaluate: empty dataset");
  m.validate();
  const auto w = effective_weights(m);
  std::vector<double> losses(data.size());
  std::vector<std::size_t> hits(data.size());
  parallel_for(data.size(), threads, [&](std::size_t i) {
    const auto fw = forward(m, w, data.sequence(i));
    const auto tgt = data.target(i);
    double s = 0.0;
    std::size_t h = 0;
    for (std::size_t k = 0; k < fw.logits.size(); ++k) {
      s += cross_entropy(fw.logits[k], tgt[k]);
      h += argmax(fw.logits[k]) == tgt[k] ? 1 : 0;
    }
    losses[i] = s;
    hits[i] = h;
  });
  EvalResult r;
  r.symbols = data.size() * data.target_length();
  double s = 0.0;
  std::size_t h = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    s += losses[i];
    h += hits[i];
  }
  r.cross_entropy = s / static_cast<double>(r.symbols);
  r.accuracy = static_cast<double>(h) / static_cast<double>(r.symbols);
  return r;
}

/// Cross-entropy for many-to-many tasks (lower is better), accuracy otherwise.
inline double validation_metric(const OrnnModel& m, const EvalResult& e) {
  return m.mode == OutputMode::many_to_many ? e.cross_entropy : e.accuracy;
}

inline bool metric_improves(const OrnnModel& m, double candidate, double best) {
  return m.mode == OutputMode::many_to_many ? candidate < best : candidate > best;
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_metric = 0.0;
  double lr = 0.0;
  double wall_time = 0.0;  ///< seconds since fit started
};

struct FitResult {
  OrnnModel best;
  OrnnModel last;
  std::vector<EpochRecord> history;
  bool diverged = false;
  std::string diagnostic;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Adam over shuffled mini-batches; keeps the parameters with the best
/// validation metric. A non-finite loss stops training and returns the last
/// good parameters with `diverged` set.
inline FitResult fit(const OrnnModel& init, const Dataset& train, const Dataset& val,
                     const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  detail::require(!train.empty(), ErrorKind::data, "fit: empty training set");
  detail::require(!val.empty(), ErrorKind::data, "fit: empty validation set");
  const auto start = std::chrono::steady_clock::now();

  FitResult res{init, init, {}, false, {}};
  OrnnModel model = init;
  TrainState state = TrainState::from_model(model);
  double best_metric = std::numeric_limits<double>::quiet_NaN();

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_schedule(epoch, cfg);
    const auto batches = make_batches(train.size(), cfg.batch_size, mix_seed(cfg.seed, 1000 + epoch));
    double loss_sum = 0.0;
    std::size_t batch_no = 0;
    for (const auto& batch : batches) {
      auto stop = [&](const std::string& why) {
        res.diverged = true;
        res.diagnostic = why + " at epoch " + std::to_string(epoch) + ", batch " +
                         std::to_string(batch_no) + " (optimizer step " +
                         std::to_string(state.step) + ")";
        res.last = model;
        return res;
      };
      BatchGradient bg;
      try {
        bg = bptt_grads(model, train, batch, cfg.threads);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::numerical) throw;
        return stop(e.what());
      }
      if (!std::isfinite(bg.loss) || !all_finite(bg.grad)) return stop("non-finite loss");
      if (cfg.grad_clip) clip_global_norm(bg.grad, *cfg.grad_clip);
      adam_step(state, bg.grad, lr, cfg);
      assign_latents(model, state.params);
      loss_sum += bg.loss * static_cast<double>(batch.size());
      ++batch_no;
    }

    EvalResult ev;
    try {
      ev = evaluate(model, val, cfg.threads);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::numerical) throw;
      res.diverged = true;
      res.diagnostic = std::string(e.what()) + " during validation after epoch " + std::to_string(epoch);
      res.last = model;
      return res;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(train.size());
    rec.val_metric = validation_metric(model, ev);
    rec.lr = lr;
    rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    res.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (std::isnan(best_metric) || metric_improves(model, rec.val_metric, best_metric)) {
      best_metric = rec.val_metric;
      res.best = model;
    }
  }
  res.last = model;
  return res;
}

}  // namespace hadamrnn
