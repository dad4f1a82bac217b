#include <gtest/gtest.h>

#include <cmath>

#include "clipmap/data.hpp"
#include "clipmap/errors.hpp"
#include "clipmap/model.hpp"
#include "clipmap/rng.hpp"
#include "oracle.hpp"

using namespace clipmap;

namespace {

EncoderConfig small(Tower t) {
  EncoderConfig c;
  c.tower = t;
  c.width = 16;
  c.depth = 2;
  c.heads = 2;
  c.embed_dim = 8;
  c.vocab = 60;
  return c;
}

ClipModel small_model(std::uint64_t seed = 1) {
  Rng rng(seed);
  ClipModel m = init_clip(small(Tower::Image), small(Tower::Text), rng);
  // Nonzero biases and affines so the oracle exercises every parameter.
  Rng noise(seed + 100);
  for (auto& [name, t] : m.named_params())
    if (t->rank() == 1)
      for (Real& v : t->data()) v += noise.normal(0, 0.1);
  return m;
}

Batch sample_batch(std::size_t n, std::uint64_t seed = 0) {
  SyntheticSpec s;
  s.seed = seed;
  std::vector<Pair> pairs;
  for (std::size_t i = 0; i < n; ++i) pairs.push_back(generate_pair(s, Split::Val, i));
  return make_batch(pairs);
}

void expect_unit_rows(const Tensor& e) {
  for (std::size_t r = 0; r < e.rows(); ++r) {
    Real s = 0;
    for (std::size_t c = 0; c < e.cols(); ++c) s += e.at(r, c) * e.at(r, c);
    EXPECT_NEAR(std::sqrt(s), 1, 1e-9);
  }
}

}  // namespace

TEST(EncoderConfig, RejectsIndivisibleHeads) {
  EncoderConfig c;
  c.width = 30;
  c.heads = 4;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(EncodeText, RowsAreUnitNorm) {
  const ClipModel m = small_model();
  expect_unit_rows(encode_text(m, sample_batch(5).tokens));
}

TEST(EncodeText, DuplicatesGiveIdenticalRows) {
  const ClipModel m = small_model();
  Batch b = sample_batch(1);
  TokenBatch two = b.tokens;
  two.batch = 2;
  two.ids.insert(two.ids.end(), b.tokens.ids.begin(), b.tokens.ids.end());
  const Tensor e = encode_text(m, two);
  for (std::size_t c = 0; c < e.cols(); ++c) EXPECT_EQ(e.at(0, c), e.at(1, c));
}

TEST(EncodeText, MatchesStraightLineOracle) {
  const ClipModel m = small_model(3);
  const Batch b = sample_batch(2, 3);
  const Tensor e = encode_text(m, b.tokens);
  std::vector<std::vector<double>> ref;
  for (std::size_t i = 0; i < 2; ++i) {
    auto row = b.tokens.row(i);
    ref.push_back(oracle::encode_text(m.text, {row.begin(), row.end()}));
    for (std::size_t c = 0; c < e.cols(); ++c) EXPECT_NEAR(e.at(i, c), ref[i][c], 1e-9);
  }
  double cos_lib = 0, cos_ref = 0;
  for (std::size_t c = 0; c < e.cols(); ++c) {
    cos_lib += e.at(0, c) * e.at(1, c);
    cos_ref += ref[0][c] * ref[1][c];
  }
  EXPECT_NEAR(cos_lib, cos_ref, 1e-9);
}

TEST(EncodeText, IgnoresContentAfterSequenceEnd) {
  const ClipModel m = small_model();
  Batch b = sample_batch(3);
  const Tensor before = encode_text(m, b.tokens);
  for (std::size_t i = 0; i < b.tokens.batch; ++i)
    for (std::size_t t = 7; t < b.tokens.length; ++t) b.tokens.ids[i * b.tokens.length + t] = 11 + t;
  EXPECT_LE(max_abs_diff(before, encode_text(m, b.tokens)), 1e-12);
}

TEST(EncodeText, OutOfRangeTokenIsInputError) {
  const ClipModel m = small_model();
  Batch b = sample_batch(1);
  b.tokens.ids[2] = 60;
  EXPECT_THROW(encode_text(m, b.tokens), InputError);
}

TEST(EncodeText, AllPaddingIsInputError) {
  const ClipModel m = small_model();
  TokenBatch t{1, 4, {0, 0, 0, 0}};
  EXPECT_THROW(encode_text(m, t), InputError);
}

TEST(EncodeImage, RowsAreUnitNorm) {
  const ClipModel m = small_model();
  expect_unit_rows(encode_image(m, sample_batch(5).images));
}

TEST(EncodeImage, MatchesStraightLineOracle) {
  const ClipModel m = small_model(4);
  const Batch b = sample_batch(2, 4);
  const Tensor e = encode_image(m, b.images);
  const std::size_t p = m.image.config.num_patches(), pd = m.image.config.patch_dim();
  for (std::size_t i = 0; i < 2; ++i) {
    oracle::Mat patches(p, std::vector<double>(pd));
    for (std::size_t t = 0; t < p; ++t)
      for (std::size_t j = 0; j < pd; ++j) patches[t][j] = b.images[(i * p + t) * pd + j];
    const auto ref = oracle::encode_image(m.image, patches);
    for (std::size_t c = 0; c < e.cols(); ++c) EXPECT_NEAR(e.at(i, c), ref[c], 1e-9);
  }
}

TEST(EncodeImage, BatchPermutationPermutesOutputs) {
  const ClipModel m = small_model();
  const Batch b = sample_batch(4);
  const std::size_t per = b.images.numel() / 4;
  Tensor perm(b.images.shape());
  const std::size_t order[4] = {2, 0, 3, 1};
  for (std::size_t i = 0; i < 4; ++i)
    std::copy_n(b.images.data().begin() + order[i] * per, per, perm.data().begin() + i * per);
  const Tensor a = encode_image(m, b.images), c = encode_image(m, perm);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) EXPECT_NEAR(c.at(i, j), a.at(order[i], j), 1e-12);
}

TEST(EncodeImage, WrongGridIsInputError) {
  const ClipModel m = small_model();
  EXPECT_THROW(encode_image(m, Tensor({2, 9, 12})), InputError);
}

TEST(Forward, BitIdenticalAcrossRuns) {
  const Batch b = sample_batch(6);
  const ClipModel m1 = small_model(9), m2 = small_model(9);
  EXPECT_TRUE(same_values(encode_image(m1, b.images), encode_image(m2, b.images)));
  EXPECT_TRUE(same_values(encode_text(m1, b.tokens), encode_text(m2, b.tokens)));
  EXPECT_EQ(checksum(m1), checksum(m2));
}

TEST(ClipLogits, SelfSimilarityIsScale) {
  const ClipModel m = small_model();
  const Tensor e = encode_image(m, sample_batch(4).images);
  const LogitPair l = clip_logits(e, e, 50);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(l.image_to_text.at(i, i), 50, 1e-12);
}

TEST(ClipLogits, OrthogonalPairsGiveZeroOffDiagonal) {
  const LogitPair l = clip_logits(Tensor::identity(3), Tensor::identity(3), 7);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(l.image_to_text.at(i, j), i == j ? 7 : 0);
}

TEST(ClipLogits, TextToImageIsExactTranspose) {
  Rng rng(2);
  Tensor a({4, 3}), b({4, 3});
  rng.fill_normal(a, 1);
  rng.fill_normal(b, 1);
  const LogitPair l = clip_logits(a, b, 3);
  EXPECT_TRUE(same_values(l.text_to_image, l.image_to_text.transposed()));
}

TEST(ClipLogits, DegenerateScaleIsNumericError) {
  EXPECT_THROW(clip_logits(Tensor::identity(2), Tensor::identity(2), 0), NumericError);
  EXPECT_THROW(clip_logits(Tensor::identity(2), Tensor::identity(2), std::nan("")), NumericError);
}

TEST(ClipModel, LogitScaleInitAndClamp) {
  ClipModel m = small_model();
  EXPECT_NEAR(m.logit_scale(), 50, 1e-12);
  m.log_logit_scale = Tensor::scalar(10);
  EXPECT_EQ(m.logit_scale(), 100);
}

TEST(ParamCount, ClosedFormMatchesEnumeration) {
  Rng pick(5);
  for (int i = 0; i < 5; ++i) {
    EncoderConfig img = small(Tower::Image), txt = small(Tower::Text);
    const std::size_t heads = 1 + pick.below(3);
    for (EncoderConfig* c : {&img, &txt}) {
      c->heads = heads;
      c->width = heads * (1 + pick.below(6));
      c->depth = 1 + pick.below(3);
      c->ffn_mult = 1 + pick.below(4);
    }
    Rng rng(i);
    const ClipModel m = init_clip(img, txt, rng);
    EXPECT_EQ(m.image.param_count(), closed_form_param_count(img));
    EXPECT_EQ(m.text.param_count(), closed_form_param_count(txt));
  }
}

TEST(ParamCount, HalvingWidthRoughlyQuartersBlocks) {
  EncoderConfig full;
  EncoderConfig half = full;
  half.width /= 2;
  const double ratio = double(closed_form_param_count(half)) / double(closed_form_param_count(full));
  EXPECT_GT(ratio, 0.2);
  EXPECT_LT(ratio, 0.35);
}

TEST(Weights, CheckShapesNamesMismatch) {
  ClipModel m = small_model();
  m.text.params.blocks[1].fc1_w = Tensor({3, 3});
  try {
    m.text.check_shapes();
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("blocks.1.fc1_w"), std::string::npos);
  }
}
