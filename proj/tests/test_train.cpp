#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "hadamrnn/train.hpp"
#include "grad_oracle.hpp"

using namespace hadamrnn;
using oracle::all_indices;
using oracle::DenseLoss;
using oracle::pixel_data;
using oracle::rel_err;
using oracle::tiny_model;

// ---------------------------------------------------------------------------

TEST(Glorot, SingleEntryBound) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(seed);
    const auto m = glorot_init(1, 1, rng);
    EXPECT_LE(std::abs(m(0, 0)), std::sqrt(3.0));
  }
}

TEST(Glorot, Variance) {
  Rng rng(1);
  const auto m = glorot_init(250, 400, rng);
  double mean = 0.0;
  for (double x : m.data()) mean += x;
  mean /= static_cast<double>(m.size());
  double var = 0.0;
  for (double x : m.data()) var += (x - mean) * (x - mean);
  var /= static_cast<double>(m.size());
  EXPECT_NEAR(var, 2.0 / 650.0, 0.05 * 2.0 / 650.0);
}

TEST(Glorot, DeterministicAndValidated) {
  Rng a(9), b(9);
  EXPECT_EQ(glorot_init(5, 7, a), glorot_init(5, 7, b));
  EXPECT_THROW(glorot_init(0, 3, a), Error);
}

TEST(Loss, UniformLogits) {
  for (std::size_t C : {2u, 9u, 10u}) EXPECT_NEAR(cross_entropy(Vector(C, 0.3), 1), std::log(double(C)), 1e-14);
}

TEST(Loss, CopyTaskNaiveBaseline) {
  const std::size_t K = 10, L = 1000, T = L + 2 * K;
  std::vector<Vector> logits;
  std::vector<std::size_t> targets;
  std::mt19937_64 rng(3);
  for (std::size_t t = 0; t < T; ++t) {
    Vector y(9, -1e3);
    if (t < L + K) {
      y[0] = 1e3;
      targets.push_back(0);
    } else {
      for (std::size_t c = 1; c < 9; ++c) y[c] = 0.0;
      targets.push_back(1 + rng() % 8);
    }
    logits.push_back(y);
  }
  const double ce = loss_xent(logits, targets);
  EXPECT_NEAR(ce, 10.0 * std::log(8.0) / 1020.0, 1e-12);
  EXPECT_NEAR(ce, 0.021, 1e-3);
  CopySpec spec;
  spec.K = K;
  spec.L = L;
  EXPECT_NEAR(spec.baseline_cross_entropy(), ce, 1e-12);
}

TEST(Loss, LargeMarginIsNearZero) {
  EXPECT_LT(cross_entropy(Vector{60.0, 0.0, -5.0}, 0), 1e-25);
}

TEST(Loss, Errors) {
  EXPECT_THROW(cross_entropy(Vector{0.0, 1.0}, 2), Error);
  EXPECT_THROW(cross_entropy(Vector{0.0, INFINITY}, 0), Error);
  EXPECT_THROW(cross_entropy(Vector{NAN, 1.0}, 0), Error);
  std::vector<Vector> one{{0.0, 0.0}};
  std::vector<std::size_t> none;
  EXPECT_THROW(loss_xent(one, none), Error);
}

// ---------------------------------------------------------------------------

TEST(Gradients, FullPrecisionMatchFiniteDifferences) {
  const double eps = 1e-5;
  for (Unit unit : {Unit::linear, Unit::relu})
    for (OutputMode mode : {OutputMode::many_to_many, OutputMode::many_to_one})
      for (bool cols : {false, true}) {
        auto m = tiny_model(unit, mode, cols, WeightQuant::full(), 11);
        const auto data = pixel_data(3, 5, 2, 2, mode, 12);
        const auto idx = all_indices(data);
        const auto g = bptt_grads(m, data, idx);
        const auto l = ParamLayout::of(m);
        DenseLoss oracle_loss{m, data, idx};
        EXPECT_NEAR(g.loss, oracle_loss.at_model(), 1e-12);
        const Vector p = flatten_latents(m);
        double worst = 0.0;
        for (std::size_t i = l.U; i < l.total; ++i) {
          auto shifted = [&](double d) {
            OrnnModel a = m;
            Vector q = p;
            q[i] += d;
            assign_latents(a, q);
            return DenseLoss{a, data, idx}.at_model();
          };
          const double fd = (shifted(eps) - shifted(-eps)) / (2 * eps);
          worst = std::max(worst, rel_err(g.grad[i], fd));
        }
        EXPECT_LT(worst, 1e-5) << "unit " << int(unit) << " mode " << int(mode) << " cols " << cols;
      }
}

TEST(Gradients, SignLatentsMatchRelaxedFiniteDifferences) {
  const double eps = 1e-5;
  for (Unit unit : {Unit::linear, Unit::relu})
    for (bool cols : {false, true}) {
      auto m = tiny_model(unit, OutputMode::many_to_many, cols, WeightQuant::uniform(4), 21);
      const auto data = pixel_data(3, 6, 2, 2, OutputMode::many_to_many, 22);
      const auto idx = all_indices(data);
      const auto g = bptt_grads(m, data, idx);
      const auto l = ParamLayout::of(m);
      DenseLoss f{m, data, idx};
      const std::size_t n = m.d_h();
      Vector u(n), c(n, 1.0);
      for (std::size_t i = 0; i < n; ++i) u[i] = m.W.row_signs[i];
      if (cols)
        for (std::size_t i = 0; i < n; ++i) c[i] = (*m.W.col_signs)[i];
      const Matrix U = m.U.effective(), V = m.V.effective();
      for (std::size_t i = 0; i < n; ++i) {
        Vector up = u, um = u;
        up[i] += eps;
        um[i] -= eps;
        const double fd = (f(up, c, U, V, m.b_i, m.b_o) - f(um, c, U, V, m.b_i, m.b_o)) / (2 * eps);
        EXPECT_LT(rel_err(g.grad[l.row_signs + i], fd), 1e-5) << "row " << i;
        if (!cols) continue;
        Vector cp = c, cm = c;
        cp[i] += eps;
        cm[i] -= eps;
        const double fdc = (f(u, cp, U, V, m.b_i, m.b_o) - f(u, cm, U, V, m.b_i, m.b_o)) / (2 * eps);
        EXPECT_LT(rel_err(g.grad[l.col_signs + i], fdc), 1e-5) << "col " << i;
      }
    }
}

TEST(Gradients, QuantizedMatricesPassStraightThrough) {
  auto q = tiny_model(Unit::linear, OutputMode::many_to_many, false, WeightQuant::uniform(3), 31);
  OrnnModel fp = q;
  fp.U = WeightMatrix(q.U.effective(), WeightQuant::full());
  fp.V = WeightMatrix(q.V.effective(), WeightQuant::full());
  const auto data = pixel_data(4, 5, 2, 2, OutputMode::many_to_many, 32);
  const auto idx = all_indices(data);
  const auto gq = bptt_grads(q, data, idx);
  const auto gf = bptt_grads(fp, data, idx);
  EXPECT_EQ(gq.grad, gf.grad);
  EXPECT_EQ(gq.loss, gf.loss);
}

TEST(Gradients, ZeroLossPoint) {
  auto m = tiny_model(Unit::linear, OutputMode::many_to_many, false, WeightQuant::full(), 41);
  m.V = WeightMatrix(Matrix(2, 8, 0.0), WeightQuant::full());
  m.b_o = {50.0, -50.0};
  auto data = pixel_data(3, 4, 2, 2, OutputMode::many_to_many, 42);
  std::fill(data.targets.begin(), data.targets.end(), 0);
  const auto g = bptt_grads(m, data, all_indices(data));
  EXPECT_LT(norm2(g.grad), 1e-40);
  EXPECT_LT(g.loss, 1e-40);
}

TEST(Gradients, IndependentOfThreadCount) {
  auto m = tiny_model(Unit::relu, OutputMode::many_to_many, true, WeightQuant::uniform(4), 51, 3, 4, 16);
  const auto data = pixel_data(37, 9, 3, 4, OutputMode::many_to_many, 52);
  const auto idx = all_indices(data);
  const auto a = bptt_grads(m, data, idx, 1);
  for (unsigned t : {2u, 3u, 8u}) {
    const auto b = bptt_grads(m, data, idx, t);
    EXPECT_EQ(a.grad, b.grad);
    EXPECT_EQ(a.loss, b.loss);
  }
}

TEST(Gradients, ShapeErrors) {
  auto m = tiny_model(Unit::linear, OutputMode::many_to_many, false, WeightQuant::full(), 61);
  const auto data = pixel_data(2, 4, 3, 2, OutputMode::many_to_many, 62);
  EXPECT_THROW(bptt_grads(m, data, all_indices(data)), Error);
  const auto ok = pixel_data(2, 4, 2, 2, OutputMode::many_to_many, 62);
  EXPECT_THROW(bptt_grads(m, ok, std::vector<std::size_t>{}), Error);
}

// First-order check at relaxed parameters: latents sit on grid points, so the
// relaxed loss and the quantized loss agree there and a small step along −g
// lowers the relaxed loss by lr·‖g‖².
TEST(Gradients, SteFirstOrderDescent) {
  for (Unit unit : {Unit::linear, Unit::relu}) {
    auto m = tiny_model(unit, OutputMode::many_to_many, true, WeightQuant::ternary(), 71);
    for (double& x : m.b_i) x = std::abs(x) + 0.2;
    m.U.set_latent(m.U.effective());
    m.V.set_latent(m.V.effective());
    const std::size_t n = m.d_h();
    Vector u(n), c(n);
    for (std::size_t i = 0; i < n; ++i) {
      u[i] = m.W.row_signs[i];
      c[i] = (*m.W.col_signs)[i];
    }
    m.W.row_signs = SignVector::from_latent(u);
    m.W.col_signs = SignVector::from_latent(c);
    const auto data = pixel_data(3, 5, 2, 2, OutputMode::many_to_many, 72);
    const auto idx = all_indices(data);
    const auto g = bptt_grads(m, data, idx);
    const auto l = ParamLayout::of(m);
    DenseLoss f{m, data, idx};
    const double base = f.at_model();
    EXPECT_NEAR(base, g.loss, 1e-12);
    const Vector p = flatten_latents(m);
    double g2 = 0.0;
    for (double x : g.grad) g2 += x * x;
    for (double lr : {1e-5, 1e-6}) {
      Vector q = p;
      for (std::size_t i = 0; i < q.size(); ++i) q[i] -= lr * g.grad[i];
      auto seg = [&](std::size_t off, std::size_t len) { return Vector(q.begin() + off, q.begin() + off + len); };
      const Matrix U(m.U.rows(), m.U.cols(), seg(l.U, m.U.rows() * m.U.cols()));
      const Matrix V(m.V.rows(), m.V.cols(), seg(l.V, m.V.rows() * m.V.cols()));
      const double moved = f(seg(l.row_signs, n), seg(l.col_signs, n), U, V, seg(l.b_i, n), seg(l.b_o, 2));
      EXPECT_LT(rel_err((moved - base) / lr, -g2), 1e-3) << "lr " << lr;
    }
  }
}

// ---------------------------------------------------------------------------

TEST(Adam, ZeroGradientKeepsParameters) {
  auto m = tiny_model(Unit::linear, OutputMode::many_to_many, true, WeightQuant::uniform(4), 81);
  auto s = TrainState::from_model(m);
  const Vector before = s.params;
  adam_step(s, Vector(before.size(), 0.0), 1e-2, TrainConfig{});
  EXPECT_EQ(s.params, before);
  EXPECT_EQ(s.step, 1u);
  EXPECT_EQ(s.m.size(), s.params.size());
  EXPECT_EQ(s.v.size(), s.params.size());
}

TEST(Adam, FirstStepClosedForm) {
  auto m = tiny_model(Unit::linear, OutputMode::many_to_many, false, WeightQuant::full(), 82);
  auto s = TrainState::from_model(m);
  const Vector before = s.params;
  std::mt19937_64 rng(83);
  const Vector g = oracle::random_vector(before.size(), rng, 1e-3);
  TrainConfig cfg;
  cfg.latent_clip = false;
  const double lr = 3e-3;
  adam_step(s, g, lr, cfg);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double expect = before[i] - lr * g[i] / (std::abs(g[i]) + 1e-8);
    EXPECT_NEAR(s.params[i], expect, 1e-15 + 1e-12 * std::abs(expect));
  }
}

TEST(Adam, LatentClip) {
  auto m = tiny_model(Unit::linear, OutputMode::many_to_many, true, WeightQuant::full(), 84);
  auto s = TrainState::from_model(m);
  const auto l = s.layout;
  Vector g(s.params.size(), 0.0);
  for (std::size_t i = 0; i < l.d_h; ++i) {
    g[l.row_signs + i] = -1.0;
    g[l.col_signs + i] = 1.0;
  }
  TrainConfig cfg;
  for (int k = 0; k < 5; ++k) adam_step(s, g, 1.0, cfg);
  for (std::size_t i = 0; i < l.d_h; ++i) {
    EXPECT_EQ(s.params[l.row_signs + i], 1.0);
    EXPECT_EQ(s.params[l.col_signs + i], -1.0);
  }
  cfg.latent_clip = false;
  auto t = TrainState::from_model(m);
  for (int k = 0; k < 5; ++k) adam_step(t, g, 1.0, cfg);
  EXPECT_GT(t.params[l.row_signs], 1.0);
}

TEST(Schedule, ExponentialDecay) {
  TrainConfig cfg;
  cfg.lr = 1e-4;
  cfg.decay = 0.98;
  EXPECT_EQ(lr_schedule(0, cfg), 1e-4);
  EXPECT_NEAR(lr_schedule(10, cfg), 8.171e-5, 5e-9);
  EXPECT_NEAR(lr_schedule(10, cfg), 1e-4 * std::pow(0.98, 10), 1e-18);
  cfg.decay = 1.0;
  for (std::size_t e : {0u, 1u, 50u}) EXPECT_EQ(lr_schedule(e, cfg), 1e-4);
}

TEST(Schedule, ConfigValidation) {
  TrainConfig cfg;
  cfg.decay = 0.0;
  EXPECT_THROW(cfg.validate(), Error);
  cfg.decay = 1.5;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = TrainConfig{};
  cfg.lr = -1.0;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = TrainConfig{};
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), Error);
}

TEST(GlobalNormClip, ScalesDown) {
  Vector g{3.0, 4.0};
  clip_global_norm(g, 1.0);
  EXPECT_NEAR(norm2(g), 1.0, 1e-15);
  Vector h{0.3, 0.4};
  clip_global_norm(h, 1.0);
  EXPECT_EQ(h, (Vector{0.3, 0.4}));
}

// ---------------------------------------------------------------------------

TEST(Layout, FlattenAssignRoundTrip) {
  auto m = tiny_model(Unit::relu, OutputMode::many_to_one, true, WeightQuant::uniform(4), 91, 3, 5, 16);
  const auto l = ParamLayout::of(m);
  EXPECT_EQ(l.total, 16u + 16u + 48u + 80u + 16u + 5u);
  Vector p = flatten_latents(m);
  p[l.row_signs] = -0.25;
  OrnnModel a = m;
  assign_latents(a, p);
  EXPECT_EQ(flatten_latents(a), p);
  EXPECT_EQ(a.W.row_signs[0], -1);
  EXPECT_THROW(assign_latents(a, Vector(3)), Error);
}

TEST(Fit, ZeroLearningRateLeavesModel) {
  auto m = tiny_model(Unit::linear, OutputMode::many_to_many, false, WeightQuant::uniform(4), 101);
  const auto train = pixel_data(20, 6, 2, 2, OutputMode::many_to_many, 102);
  const auto val = pixel_data(5, 6, 2, 2, OutputMode::many_to_many, 103);
  TrainConfig cfg;
  cfg.lr = 0.0;
  cfg.epochs = 1;
  cfg.batch_size = 8;
  const auto r = fit(m, train, val, cfg);
  ASSERT_EQ(r.history.size(), 1u);
  EXPECT_FALSE(r.diverged);
  EXPECT_EQ(flatten_latents(r.best), flatten_latents(m));
  EXPECT_EQ(flatten_latents(r.last), flatten_latents(m));
  EXPECT_NEAR(r.history[0].val_metric, evaluate(m, val).cross_entropy, 1e-15);
  EXPECT_EQ(r.history[0].lr, 0.0);
}

TEST(Fit, DeterministicAndKeepsBest) {
  auto m = tiny_model(Unit::relu, OutputMode::many_to_one, true, WeightQuant::uniform(4), 111, 2, 3, 16);
  const auto train = pixel_data(60, 8, 2, 3, OutputMode::many_to_one, 112);
  const auto val = pixel_data(20, 8, 2, 3, OutputMode::many_to_one, 113);
  TrainConfig cfg;
  cfg.lr = 2e-2;
  cfg.epochs = 6;
  cfg.batch_size = 16;
  std::vector<EpochRecord> seen;
  const auto a = fit(m, train, val, cfg, [&](const EpochRecord& r) { seen.push_back(r); });
  cfg.threads = 3;
  const auto b = fit(m, train, val, cfg);
  ASSERT_EQ(a.history.size(), 6u);
  EXPECT_EQ(seen.size(), 6u);
  EXPECT_EQ(flatten_latents(a.best), flatten_latents(b.best));
  EXPECT_EQ(flatten_latents(a.last), flatten_latents(b.last));
  double best = -1.0;
  for (std::size_t e = 0; e < a.history.size(); ++e) {
    EXPECT_EQ(a.history[e].train_loss, b.history[e].train_loss);
    EXPECT_EQ(a.history[e].val_metric, b.history[e].val_metric);
    EXPECT_EQ(a.history[e].epoch, e);
    EXPECT_NEAR(a.history[e].lr, 2e-2 * std::pow(0.98, double(e)), 1e-17);
    best = std::max(best, a.history[e].val_metric);
  }
  EXPECT_EQ(evaluate(a.best, val).accuracy, best);
}

TEST(Fit, SignViewsStayOrthogonal) {
  ModelConfig mc;
  mc.hidden = 16;
  mc.kind = RecurrentKind::block_ternary;
  mc.q = 2;
  mc.column_signs = true;
  auto m = init_model(mc, 2, 2, OutputMode::many_to_many, 5);
  const auto data = pixel_data(30, 5, 2, 2, OutputMode::many_to_many, 121);
  auto s = TrainState::from_model(m);
  TrainConfig cfg;
  for (int step = 0; step < 25; ++step) {
    std::vector<std::size_t> idx{std::size_t(step) % 30, std::size_t(step * 7 + 1) % 30};
    const auto g = bptt_grads(m, data, idx);
    adam_step(s, g.grad, 0.05, cfg);
    assign_latents(m, s.params);
    const auto C = materialize_codes(m.W);
    for (std::size_t i = 0; i < 16; ++i)
      for (std::size_t j = 0; j < 16; ++j) {
        long long dot = 0;
        for (std::size_t k = 0; k < 16; ++k) dot += C(i, k) * C(j, k);
        ASSERT_EQ(dot, i == j ? 8 : 0) << "step " << step;
      }
  }
}

TEST(Fit, DivergenceReportsDiagnostic) {
  auto m = tiny_model(Unit::linear, OutputMode::many_to_many, false, WeightQuant::full(), 131);
  const auto train = pixel_data(16, 6, 2, 2, OutputMode::many_to_many, 132);
  const auto val = pixel_data(4, 6, 2, 2, OutputMode::many_to_many, 133);
  TrainConfig cfg;
  cfg.lr = 1e300;
  cfg.epochs = 3;
  cfg.batch_size = 4;
  const auto r = fit(m, train, val, cfg);
  EXPECT_TRUE(r.diverged);
  EXPECT_NE(r.diagnostic.find("epoch 0"), std::string::npos) << r.diagnostic;
  EXPECT_NE(r.diagnostic.find("optimizer step"), std::string::npos);
  EXPECT_TRUE(r.history.empty());
  EXPECT_EQ(flatten_latents(r.best), flatten_latents(m));
}

TEST(Fit, RejectsEmptyData) {
  auto m = tiny_model(Unit::linear, OutputMode::many_to_many, false, WeightQuant::full(), 141);
  const auto train = pixel_data(4, 3, 2, 2, OutputMode::many_to_many, 142);
  Dataset empty = train.head(0);
  EXPECT_THROW(fit(m, empty, train, TrainConfig{}), Error);
  EXPECT_THROW(fit(m, train, empty, TrainConfig{}), Error);
}

TEST(Init, ModelShapesAndSigns) {
  ModelConfig mc;
  mc.hidden = 32;
  const auto m = init_model(mc, 10, 9, OutputMode::many_to_many, 1);
  EXPECT_EQ(m.d_h(), 32u);
  EXPECT_EQ(m.d_in(), 10u);
  EXPECT_EQ(m.d_out(), 9u);
  for (double x : m.W.row_signs.latent()) EXPECT_EQ(std::abs(x), mc.sign_init);
  EXPECT_EQ(flatten_latents(m), flatten_latents(init_model(mc, 10, 9, OutputMode::many_to_many, 1)));
  mc.q = 2;
  EXPECT_THROW(init_model(mc, 10, 9, OutputMode::many_to_many, 1), Error);
  mc.kind = RecurrentKind::block_ternary;
  EXPECT_EQ(init_model(mc, 10, 9, OutputMode::many_to_many, 1).W.q, 2u);
  mc.hidden = 24;
  EXPECT_THROW(init_model(mc, 10, 9, OutputMode::many_to_many, 1), Error);
}
