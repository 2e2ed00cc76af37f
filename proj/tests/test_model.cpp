#include <algorithm>
#include <cstring>
#include <numeric>

#include "support.hpp"

using namespace mspm;
using namespace mspm::testing;

namespace {

ModelConfig eval_config() {
  ModelConfig c;
  c.dropout = 0.0f;
  return c;
}

const Context kEval{Mode::Eval, nullptr};

}  // namespace

TEST(Backbone, LayerOutputShapes) {
  Model m(eval_config());
  m.init(1);
  Rng rng(1);
  auto out = m.backbone(randn({1, 1, 64, 64}, rng), kEval);
  const std::vector<Shape> expect = {{1, 32, 64, 64}, {1, 32, 64, 64}, {1, 64, 31, 31},  {1, 64, 31, 31},
                                     {1, 128, 29, 29}, {1, 128, 29, 29}, {1, 128, 29, 29}, {1, 128, 29, 29}};
  ASSERT_EQ(out.layer_shapes.size(), expect.size());
  for (std::size_t i = 0; i < expect.size(); ++i) {
    EXPECT_EQ(out.layer_shapes[i], expect[i]) << kBackboneRows[i].name;
  }
  EXPECT_EQ(out.full_map.shape(), (Shape{1, 128, 29, 29}));
  ASSERT_EQ(out.pyramid.size(), 4u);
  const std::int64_t sizes[] = {8, 4, 2, 1};
  for (int k = 0; k < 4; ++k) EXPECT_EQ(out.pyramid[k].shape(), (Shape{1, 128, sizes[k], sizes[k]}));
}

TEST(Backbone, RejectsWrongInput) {
  Model m(eval_config());
  EXPECT_THROW(m.backbone(Tensor({1, 1, 32, 32}), kEval), InvalidArgument);
  EXPECT_THROW(m.backbone(Tensor({1, 3, 64, 64}), kEval), InvalidArgument);
  EXPECT_THROW(m.backbone(Tensor({1, 64, 64}), kEval), InvalidArgument);
  ModelConfig rgb = eval_config();
  rgb.in_channels = 3;
  Model m3(rgb);
  m3.init(2);
  Rng rng(2);
  EXPECT_EQ(m3.embed(randn({1, 3, 64, 64}, rng), kEval).desc.shape(), (Shape{1, 128}));
}

TEST(Backbone, PooledValuesLieWithinTheMap) {
  auto c = tiny_config();
  Model m(c);
  m.init(3);
  Rng rng(3);
  auto out = m.backbone(randn({2, 1, 16, 16}, rng), kEval);
  const auto& f = out.full_map;
  for (const auto& p : out.pyramid) {
    for (std::int64_t n = 0; n < 2; ++n) {
      for (std::int64_t ch = 0; ch < f.dim(1); ++ch) {
        float lo = 1e30f, hi = -1e30f;
        const std::int64_t plane = f.dim(2) * f.dim(3);
        for (std::int64_t k = 0; k < plane; ++k) {
          lo = std::min(lo, f[(n * f.dim(1) + ch) * plane + k]);
          hi = std::max(hi, f[(n * f.dim(1) + ch) * plane + k]);
        }
        const std::int64_t pp = p.dim(2) * p.dim(3);
        for (std::int64_t k = 0; k < pp; ++k) {
          EXPECT_GE(p[(n * p.dim(1) + ch) * pp + k], lo - 1e-6f);
          EXPECT_LE(p[(n * p.dim(1) + ch) * pp + k], hi + 1e-6f);
        }
      }
    }
  }
}

TEST(Parameters, DefaultCounts) {
  Model m(ModelConfig{});
  const auto& p = m.params();
  EXPECT_EQ(p.parameter_count("backbone/"), 583008);
  EXPECT_EQ(p.parameter_count("encoder/"), 398592);
  EXPECT_EQ(p.parameter_count("head/"), 1114240);
  EXPECT_EQ(p.parameter_count(), 2095840);
  EXPECT_EQ(p.parameter_count(), expected_parameters(ModelConfig{}));
  ModelConfig narrow;
  narrow.width = 32;
  EXPECT_EQ(Model(narrow).params().parameter_count(), 341464);
  EXPECT_EQ(Model(narrow).params().parameter_count(), expected_parameters(narrow));
}

TEST(Parameters, AblationDeltas) {
  const std::int64_t base = Model(ModelConfig{}).params().parameter_count();
  for (const auto& a : ablations()) {
    ModelConfig c;
    a.apply(c);
    Model m(c);
    EXPECT_EQ(m.params().parameter_count() - base, a.delta) << a.name;
    EXPECT_EQ(m.params().parameter_count(), expected_parameters(c)) << a.name;
  }
}

TEST(Parameters, AblationModelsRun) {
  Rng rng(4);
  auto x = randn({2, 1, 64, 64}, rng);
  for (const auto& a : ablations()) {
    ModelConfig c = eval_config();
    a.apply(c);
    Model m(c);
    m.init(4);
    auto e = m.embed(x, kEval);
    EXPECT_EQ(e.desc.shape(), (Shape{2, c.descriptor_dim})) << a.name;
    for (float v : e.desc.data()) EXPECT_TRUE(std::isfinite(v)) << a.name;
  }
}

TEST(Parameters, OtherAxes) {
  auto c = tiny_config();
  const auto base = Model(c).params().parameter_count();
  c.per_scale_token = true;
  EXPECT_EQ(Model(c).params().parameter_count() - base, 3 * c.width);
  EXPECT_EQ(Model(c).params().parameter_count(), expected_parameters(c));
  c = tiny_config();
  c.ffn_dim = 16;
  EXPECT_EQ(Model(c).params().parameter_count(), expected_parameters(c));
  c = tiny_config();
  c.encoder = false;
  c.residual = false;
  EXPECT_EQ(Model(c).params().parameter_count(), expected_parameters(c));
}

TEST(Config, RejectsUnsupportedVariants) {
  ModelConfig c;
  c.decoder = true;
  EXPECT_THROW(Model{c}, InvalidArgument);
  c = ModelConfig{};
  c.pseudo_siamese = true;
  EXPECT_THROW(Model{c}, InvalidArgument);
  c = ModelConfig{};
  c.encoder = false;
  EXPECT_THROW(Model{c}, InvalidArgument);
  c = ModelConfig{};
  c.heads = 3;
  EXPECT_THROW(Model{c}, InvalidArgument);
  c = ModelConfig{};
  c.pyramid = {8, 8};
  EXPECT_THROW(Model{c}, InvalidArgument);
  c = ModelConfig{};
  c.pyramid = {30};
  EXPECT_THROW(Model{c}, InvalidArgument);
}

TEST(Head, InputDimensions) {
  ModelConfig c;
  EXPECT_EQ(c.head_input_dim(), 8704);
  c.residual = false;
  EXPECT_EQ(c.head_input_dim(), 512);
  Model m(c);
  EXPECT_EQ(m.params().get("head/fc/weight").shape(), (Shape{128, 512}));
  std::vector<Tensor> parts(4, Tensor({1, 128}));
  parts.push_back(Tensor({1, 128}));
  EXPECT_THROW(m.fuse_and_project(parts, {}), DimensionMismatch);
}

TEST(Siamese, IdenticalPatchesGiveBitwiseIdenticalUnitDescriptors) {
  Model m(eval_config());
  m.init(5);
  Rng rng(5);
  auto x = randn({2, 1, 64, 64}, rng);
  auto y = randn({2, 1, 64, 64}, rng);
  auto [bx, by] = m.siamese(x, x, kEval);
  EXPECT_TRUE(bitwise_equal(bx.full_map, by.full_map));
  auto a = m.embed(x, kEval).desc, b = m.embed(x, kEval).desc;
  EXPECT_TRUE(bitwise_equal(a, b));
  auto [sx, sy] = m.siamese(x, y, kEval);
  auto [tx, ty] = m.siamese(y, x, kEval);
  EXPECT_TRUE(bitwise_equal(sx.full_map, ty.full_map));
  EXPECT_TRUE(bitwise_equal(sy.full_map, tx.full_map));
  for (const auto& d : {a, m.embed(y, kEval).desc}) {
    for (std::int64_t r = 0; r < d.dim(0); ++r) {
      double n = 0.0;
      for (std::int64_t j = 0; j < d.dim(1); ++j) n += static_cast<double>(d[r * d.dim(1) + j]) * d[r * d.dim(1) + j];
      EXPECT_NEAR(std::sqrt(n), 1.0, 1e-5);
    }
  }
}

TEST(Siamese, BatchMatchesSingleRuns) {
  auto c = eval_config();
  c.width = 32;
  Model m(c);
  m.init(6);
  jitter(m.params(), 6);
  // eval-mode batchnorm with non-trivial running statistics
  for (const auto& e : m.params().entries()) {
    if (e.role != ParamRole::RunningVar) continue;
    auto t = e.tensor;
    for (auto& v : t.data()) v = 0.5f + std::fabs(v);
  }
  Rng rng(6);
  auto x = randn({3, 1, 64, 64}, rng);
  auto batch = m.embed(x, kEval).desc;
  for (std::int64_t i = 0; i < 3; ++i) {
    auto one = m.embed(slice(x, 0, i, 1), kEval).desc;
    for (std::int64_t j = 0; j < one.numel(); ++j) EXPECT_NEAR(one[j], batch[i * one.numel() + j], 1e-6);
  }
}

TEST(Siamese, DescriptorDimensions) {
  Rng rng(7);
  auto x = randn({2, 1, 16, 16}, rng);
  for (int d : {64, 128, 256}) {
    auto c = tiny_config();
    c.descriptor_dim = d;
    Model m(c);
    m.init(7);
    EXPECT_EQ(m.embed(x, kEval).desc.shape(), (Shape{2, d}));
  }
}

TEST(Siamese, GemmAndDirectAgree) {
  auto c = tiny_config();
  Model g(c);
  c.conv_algorithm = ConvAlgorithm::Direct;
  Model d(c);
  g.init(8);
  d.params().copy_values_from(g.params());
  Rng rng(8);
  auto x = randn({2, 1, 16, 16}, rng);
  EXPECT_LT(max_diff(g.embed(x, kEval).desc, d.embed(x, kEval).desc), 1e-5);
}

TEST(Positional, CellIsConcatenationOfRowAndColumn) {
  ParamStore s;
  PositionalEncoding<float> pe(s, "pos", PosEncoding::Learned2d, 8, 8, 128);
  EXPECT_EQ(pe.row.shape(), (Shape{8, 64}));
  EXPECT_EQ(pe.col.shape(), (Shape{8, 64}));
  init_params(s, 9);
  auto e = build_positional_encoding(pe);
  ASSERT_EQ(e.shape(), (Shape{64, 128}));
  for (int i = 0; i < 8; ++i) {
    for (int j = 0; j < 8; ++j) {
      for (int c = 0; c < 64; ++c) {
        EXPECT_EQ(e[(i * 8 + j) * 128 + c], pe.row[i * 64 + c]);
        EXPECT_EQ(e[(i * 8 + j) * 128 + 64 + c], pe.col[j * 64 + c]);
      }
    }
  }
  bool differs = false;
  for (int c = 0; c < 128; ++c) differs |= e[1 * 128 + c] != e[8 * 128 + c];
  EXPECT_TRUE(differs);
}

TEST(Positional, FixedTablesAndErrors) {
  ParamStore s;
  PositionalEncoding<float> pe(s, "pos", PosEncoding::Fixed2d, 4, 4, 8);
  EXPECT_EQ(s.size(), 0u);
  auto e = build_positional_encoding(pe);
  // cell (i, j): row half is the sinusoid of position i, col half of j
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) {
      for (int c = 0; c < 4; ++c) {
        const double fr = std::pow(10000.0, -static_cast<double>(c - c % 2) / 4.0);
        const double r = c % 2 ? std::cos(i * fr) : std::sin(i * fr);
        const double q = c % 2 ? std::cos(j * fr) : std::sin(j * fr);
        EXPECT_NEAR(e[(i * 4 + j) * 8 + c], r, 1e-6);
        EXPECT_NEAR(e[(i * 4 + j) * 8 + 4 + c], q, 1e-6);
      }
    }
  }
  PositionalEncoding<float> one(s, "pos1", PosEncoding::Fixed1d, 2, 3, 6);
  EXPECT_EQ(build_positional_encoding(one).shape(), (Shape{6, 6}));
  EXPECT_THROW(PositionalEncoding<float>(s, "odd", PosEncoding::Learned2d, 2, 2, 7), InvalidArgument);
  PositionalEncoding<float> none(s, "none", PosEncoding::None, 2, 2, 8);
  EXPECT_FALSE(build_positional_encoding(none).defined());
}

TEST(Positional, FlattenWithToken) {
  ParamStore s;
  PositionalEncoding<float> none(s, "p0", PosEncoding::None, 8, 8, 4);
  Rng rng(10);
  auto map = randn({2, 4, 8, 8}, rng);
  auto seq = flatten_with_token(map, none, Tensor({4}, 0.0f));
  ASSERT_EQ(seq.shape(), (Shape{2, 65, 4}));
  for (std::int64_t n = 0; n < 2; ++n) {
    for (int c = 0; c < 4; ++c) EXPECT_EQ(seq[(n * 65) * 4 + c], 0.0f);
    for (int i = 0; i < 8; ++i)
      for (int j = 0; j < 8; ++j)
        for (int c = 0; c < 4; ++c)
          EXPECT_EQ(seq[(n * 65 + 1 + i * 8 + j) * 4 + c], map[((n * 4 + c) * 8 + i) * 8 + j]);
  }
  PositionalEncoding<float> unit(s, "p1", PosEncoding::None, 1, 1, 4);
  EXPECT_EQ(flatten_with_token(randn({1, 4, 1, 1}, rng), unit, Tensor({4})).shape(), (Shape{1, 2, 4}));
  EXPECT_THROW(flatten_with_token(map, none, Tensor({3})), InvalidArgument);
  // learned code added to cells, token left alone
  PositionalEncoding<float> learned(s, "p2", PosEncoding::Learned2d, 8, 8, 4);
  init_params(s, 10);
  auto tok = randn({4}, rng);
  auto with = flatten_with_token(map, learned, tok);
  auto code = build_positional_encoding(learned);
  for (int c = 0; c < 4; ++c) EXPECT_EQ(with[c], tok[c]);
  for (int k = 0; k < 64; ++k)
    for (int c = 0; c < 4; ++c) EXPECT_EQ(with[(1 + k) * 4 + c], seq[(1 + k) * 4 + c] + code[k * 4 + c]);
}


TEST(Positional, PermutationContract) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    EXPECT_LE(permutation_change(PosEncoding::None, seed), 1e-5);
    EXPECT_GT(permutation_change(PosEncoding::Learned2d, seed), 1e-3);
  }
}

TEST(Aggregation, ZeroedSublayersReturnTheToken) {
  auto c = tiny_config();
  c.per_scale_token = true;
  Model m(c);
  m.init(11);
  jitter(m.params(), 11);
  for (const auto& e : m.params().entries()) {
    if (e.name.find("/attn/") == std::string::npos && e.name.find("/ffn/") == std::string::npos) continue;
    auto t = e.tensor;
    for (auto& v : t.data()) v = 0.0f;
  }
  Rng rng(11);
  auto bb = m.backbone(randn({2, 1, 16, 16}, rng), kEval);
  auto agg = m.aggregate(bb.pyramid, kEval);
  ASSERT_EQ(agg.outputs.size(), 4u);
  for (std::size_t k = 0; k < 4; ++k) {
    const auto& tok = m.params().get("encoder/token" + std::to_string(k));
    ASSERT_EQ(agg.outputs[k].shape(), (Shape{2, 8}));
    for (std::int64_t n = 0; n < 2; ++n)
      for (int j = 0; j < 8; ++j) EXPECT_EQ(agg.outputs[k][n * 8 + j], tok[j]);
  }
}

TEST(Aggregation, SharedEncoderAffectsEveryScale) {
  auto c = tiny_config();
  Model m(c);
  m.init(12);
  Rng rng(12);
  auto bb = m.backbone(randn({1, 1, 16, 16}, rng), kEval);
  auto before = m.aggregate(bb.pyramid, kEval);
  for (std::size_t k = 0; k < 4; ++k) {
    const auto& w = before.record.weights[k];
    ASSERT_EQ(w.size(), 2u);
    const std::int64_t l = c.pyramid[k] * c.pyramid[k] + 1;
    EXPECT_EQ(w[0].shape(), (Shape{1, 2, l, l}));
  }
  for (const auto& e : m.params().entries()) {
    if (e.name.rfind("encoder/layer", 0) == 0) {
      EXPECT_EQ(e.name.find("scale"), std::string::npos) << e.name;
    }
  }
  auto q = m.params().get("encoder/layer1/ffn/fc2/bias");
  q[0] += 0.5f;
  auto after = m.aggregate(bb.pyramid, kEval);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_GT(max_diff(before.outputs[k], after.outputs[k]), 1e-3) << k;
}

TEST(Embed, EncoderOffRuns) {
  auto c = tiny_config();
  c.encoder = false;
  c.residual = false;
  Model m(c);
  m.init(13);
  Rng rng(13);
  auto e = m.embed(randn({2, 1, 16, 16}, rng), kEval);
  EXPECT_EQ(e.desc.shape(), (Shape{2, 8}));
  EXPECT_TRUE(e.record.scale_sizes.empty());
  EXPECT_THROW(m.aggregate({}, kEval), InvalidArgument);
}

// Full pipeline: backbone, pyramid, encoder, head, normalization, both
// branches, every trainable parameter.
class PipelineGrad : public ::testing::TestWithParam<int> {};

TEST_P(PipelineGrad, MatchesFiniteDifferences) {
  const auto r = pipeline_grad_check(GetParam());
  expect_pass(r, "pipeline seed " + std::to_string(GetParam()));
  EXPECT_EQ(total_checked(r) + total_skipped(r), static_cast<std::size_t>(Model(tiny_config()).params().parameter_count()));
  EXPECT_LT(total_skipped(r), total_checked(r) / 100);
}

INSTANTIATE_TEST_SUITE_P(Seeds, PipelineGrad, ::testing::Range(0, kSeeds));
