#include <gtest/gtest.h>

#include <filesystem>

#include "hadamrnn/serialize.hpp"
#include "hadamrnn/train.hpp"

using namespace hadamrnn;

namespace {

OrnnModel make(RecurrentKind kind, std::size_t q, WeightQuant wq, bool cols, Unit unit,
               OutputMode mode = OutputMode::many_to_many) {
  ModelConfig mc;
  mc.hidden = 32;
  mc.kind = kind;
  mc.q = q;
  mc.quant = wq;
  mc.column_signs = cols;
  mc.unit = unit;
  auto m = init_model(mc, copy_alphabet, copy_classes, mode, 17);
  Rng rng(5);
  std::normal_distribution<double> n(0.0, 0.3);
  for (double& x : m.b_i) x = n(rng);
  for (double& x : m.b_o) x = n(rng);
  return m;
}

void expect_same_forward(const OrnnModel& a, const OrnnModel& b) {
  const auto d = gen_copy(3, 5, 4, 2);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto x = d.sequence(i);
    const auto ra = forward(a, x), rb = forward(b, x);
    ASSERT_EQ(ra.logits.size(), rb.logits.size());
    for (std::size_t t = 0; t < ra.logits.size(); ++t) EXPECT_EQ(ra.logits[t], rb.logits[t]);
  }
}

void expect_same_model(const OrnnModel& a, const OrnnModel& b) {
  EXPECT_EQ(a.W.kind, b.W.kind);
  EXPECT_EQ(a.W.q, b.W.q);
  EXPECT_EQ(a.W.order.k(), b.W.order.k());
  EXPECT_EQ(a.W.row_signs, b.W.row_signs);
  EXPECT_EQ(a.W.col_signs.has_value(), b.W.col_signs.has_value());
  if (a.W.col_signs && b.W.col_signs) {
    EXPECT_EQ(*a.W.col_signs, *b.W.col_signs);
  }
  EXPECT_EQ(a.unit, b.unit);
  EXPECT_EQ(a.mode, b.mode);
  EXPECT_EQ(a.activation, b.activation);
  EXPECT_EQ(a.b_i, b.b_i);
  EXPECT_EQ(a.b_o, b.b_o);
  for (auto [x, y] : {std::pair{&a.U, &b.U}, std::pair{&a.V, &b.V}}) {
    if (a.quant().quantized()) {
      const auto qx = x->quantized(), qy = y->quantized();
      EXPECT_EQ(qx.codes.data(), qy.codes.data());
      EXPECT_EQ(qx.alpha, qy.alpha);
      EXPECT_TRUE(y->is_frozen());
    } else {
      EXPECT_EQ(x->latent().data(), y->latent().data());
    }
  }
  expect_same_forward(a, b);
}

}  // namespace

TEST(ModelFile, RoundTripVariants) {
  struct Case {
    RecurrentKind kind;
    std::size_t q;
    WeightQuant wq;
    bool cols;
    Unit unit;
  };
  for (const auto& c : {Case{RecurrentKind::binary, 1, WeightQuant::uniform(4), false, Unit::linear},
                        Case{RecurrentKind::binary, 1, WeightQuant::uniform(12), true, Unit::relu},
                        Case{RecurrentKind::block_ternary, 4, WeightQuant::ternary(), false, Unit::linear},
                        Case{RecurrentKind::block_ternary, 2, WeightQuant::uniform(2), true, Unit::relu},
                        Case{RecurrentKind::binary, 1, WeightQuant::full(), false, Unit::linear}}) {
    const auto m = make(c.kind, c.q, c.wq, c.cols, c.unit);
    const auto bytes = encode_model({m, std::nullopt});
    const auto back = decode_model(bytes);
    EXPECT_FALSE(back.plan.has_value());
    expect_same_model(m, back.model);
    EXPECT_EQ(encode_model(back), bytes);
  }
}

TEST(ModelFile, ManyToOneHead) {
  const auto m = make(RecurrentKind::binary, 1, WeightQuant::uniform(6), false, Unit::linear,
                      OutputMode::many_to_one);
  expect_same_model(m, decode_model(encode_model({m, std::nullopt})).model);
}

TEST(ModelFile, PlanRoundTrip) {
  const auto m = make(RecurrentKind::binary, 1, WeightQuant::uniform(4), false, Unit::linear);
  const auto calib = gen_copy(3, 5, 20, 8);
  const auto plan = calibrate(m, calib, 10, 2);
  const auto back = decode_model(encode_model({m, plan}));
  ASSERT_TRUE(back.plan.has_value());
  const auto& p = *back.plan;
  EXPECT_EQ(p.p_a, plan.p_a);
  EXPECT_EQ(p.p_i, plan.p_i);
  EXPECT_EQ(p.alpha_U, plan.alpha_U);
  EXPECT_EQ(p.alpha_V, plan.alpha_V);
  EXPECT_EQ(p.alpha_W, plan.alpha_W);
  EXPECT_EQ(p.alpha_i, plan.alpha_i);
  EXPECT_EQ(p.alpha_h, plan.alpha_h);
  EXPECT_EQ(p.n_h, plan.n_h);
  EXPECT_EQ(p.max_h, plan.max_h);
  EXPECT_EQ(p.bias_codes, plan.bias_codes);
  EXPECT_EQ(p.requant.exponent, plan.requant.exponent);
  EXPECT_EQ(p.requant.sqrt2, plan.requant.sqrt2);
  for (std::size_t i = 0; i < calib.size(); ++i) {
    const auto x = calib.sequence(i);
    const auto a = ptq_forward(plan, m, x), b = ptq_forward(p, back.model, x);
    EXPECT_EQ(a.hidden, b.hidden);
    EXPECT_EQ(a.logits, b.logits);
  }
}

TEST(ModelFile, RejectsCorruptInput) {
  const auto m = make(RecurrentKind::binary, 1, WeightQuant::uniform(4), true, Unit::linear);
  const auto bytes = encode_model({m, std::nullopt});
  auto expect_data_error = [](std::vector<std::uint8_t> b) {
    try {
      decode_model(b);
      ADD_FAILURE() << "decoded corrupt bytes";
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::data) << e.what();
    }
  };
  auto bad_magic = bytes;
  bad_magic[1] = 'Z';
  expect_data_error(bad_magic);
  auto bad_version = bytes;
  bad_version[4] ^= 0x7f;
  expect_data_error(bad_version);
  auto bad_order = bytes;
  bad_order[4 + 4 + 24] = 9;
  expect_data_error(bad_order);
  auto trailing = bytes;
  trailing.push_back(1);
  expect_data_error(trailing);
  for (std::size_t cut : {std::size_t{3}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
    auto truncated = bytes;
    truncated.resize(cut);
    expect_data_error(truncated);
  }
}

TEST(ModelFile, SaveAndLoad) {
  const auto m = make(RecurrentKind::block_ternary, 2, WeightQuant::uniform(8), false, Unit::relu);
  const auto path = std::filesystem::temp_directory_path() /
                    ("hadamrnn_model_" + std::to_string(::getpid()) + ".bin");
  save_model(path.string(), {m, std::nullopt});
  const auto back = load_model(path.string());
  std::filesystem::remove(path);
  expect_same_model(m, back.model);
  EXPECT_THROW(load_model(path.string()), Error);
}
