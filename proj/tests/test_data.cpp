#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "clipmap/data.hpp"
#include "clipmap/errors.hpp"

using namespace clipmap;

TEST(Generator, PureInSpecSplitAndIndex) {
  SyntheticSpec s;
  const Pair a = generate_pair(s, Split::Train, 17), b = generate_pair(s, Split::Train, 17);
  EXPECT_TRUE(same_values(a.image, b.image));
  EXPECT_EQ(a.tokens, b.tokens);
  EXPECT_EQ(a.latent, b.latent);
  const Pair v = generate_pair(s, Split::Val, 17);
  EXPECT_FALSE(same_values(a.image, v.image));
  s.seed = 1;
  EXPECT_FALSE(same_values(a.image, generate_pair(s, Split::Train, 17).image));
}

TEST(Generator, ShapesAndTokenLayout) {
  SyntheticSpec s;
  const Pair p = generate_pair(s, Split::Train, 3);
  EXPECT_EQ(p.image.shape(), (Shape{16, 12}));
  ASSERT_EQ(p.tokens.size(), s.max_len);
  EXPECT_EQ(p.tokens[0], tokens::kBos);
  for (std::size_t k = 0; k < s.attributes; ++k) EXPECT_EQ(p.tokens[1 + k], value_token(s, k, p.latent[k]));
  EXPECT_EQ(p.tokens[1 + s.attributes], tokens::kEos);
  for (std::size_t i = 2 + s.attributes; i < s.max_len; ++i) EXPECT_EQ(p.tokens[i], tokens::kPad);
  for (std::uint32_t t : p.tokens) EXPECT_LT(t, s.vocab_needed());
}

TEST(Generator, SmallGridEnumeratesAllLatents) {
  SyntheticSpec s;
  s.attributes = 2;
  s.values = 4;
  std::set<std::vector<std::size_t>> seen;
  for (std::size_t i = 0; i < 2000; ++i) seen.insert(generate_pair(s, Split::Train, i).latent);
  EXPECT_EQ(seen.size(), 16u);
}

TEST(Generator, CaptionDeterminedByLatent) {
  SyntheticSpec s;
  for (std::size_t i = 0; i < 50; ++i) {
    const Pair p = generate_pair(s, Split::Train, i);
    EXPECT_EQ(p.tokens, caption_tokens(s, p.latent));
  }
}

TEST(Generator, RegionsPartitionGrid) {
  SyntheticSpec s;
  std::vector<std::size_t> count(s.attributes);
  for (std::size_t r = 0; r < s.grid; ++r)
    for (std::size_t c = 0; c < s.grid; ++c) ++count[region_of(s, r, c)];
  for (std::size_t n : count) EXPECT_EQ(n, s.num_patches() / s.attributes);
}

TEST(Generator, InvalidSpecIsConfigError) {
  SyntheticSpec s;
  s.attributes = 17;
  EXPECT_THROW(s.validate(), ConfigError);
  s = SyntheticSpec{};
  s.max_len = 5;
  EXPECT_THROW(s.validate(), ConfigError);
  s = SyntheticSpec{};
  s.values = 0;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Prompts, ExampleLayout) {
  SyntheticSpec s;
  const auto p = prompt_for_class(s, 1, 5);
  ASSERT_EQ(p.size(), s.max_len);
  EXPECT_EQ(p[0], tokens::kBos);
  EXPECT_EQ(p[1], tokens::kWildcard);
  EXPECT_EQ(p[2], value_token(s, 1, 5));
  EXPECT_EQ(p[3], tokens::kWildcard);
  EXPECT_EQ(p[4], tokens::kWildcard);
  EXPECT_EQ(p[5], tokens::kEos);
}

TEST(Prompts, RoundTrip) {
  SyntheticSpec s;
  for (std::size_t k = 0; k < s.attributes; ++k)
    for (std::size_t v = 0; v < s.values; ++v) {
      const PromptClass c = parse_prompt(s, prompt_for_class(s, k, v));
      EXPECT_EQ(c.attribute, k);
      EXPECT_EQ(c.value, v);
    }
}

TEST(Prompts, RejectsCaptions) {
  SyntheticSpec s;
  EXPECT_THROW(parse_prompt(s, generate_pair(s, Split::Val, 0).tokens), InputError);
  EXPECT_THROW(prompt_for_class(s, s.attributes, 0), InputError);
}

TEST(BatchIter, PermutationWithTailDropped) {
  const auto batches = batch_iter(10, 3, 5, 0);
  ASSERT_EQ(batches.size(), 3u);
  std::set<std::size_t> seen;
  for (const auto& b : batches) {
    EXPECT_EQ(b.size(), 3u);
    seen.insert(b.begin(), b.end());
  }
  EXPECT_EQ(seen.size(), 9u);
  for (std::size_t i : seen) EXPECT_LT(i, 10u);
}

TEST(BatchIter, SeededAndEpochDependent) {
  EXPECT_EQ(batch_iter(100, 10, 1, 0), batch_iter(100, 10, 1, 0));
  EXPECT_NE(batch_iter(100, 10, 1, 0), batch_iter(100, 10, 1, 1));
  EXPECT_NE(batch_iter(100, 10, 1, 0), batch_iter(100, 10, 2, 0));
  EXPECT_EQ(batch_iter(5, 5, 1, 0).size(), 1u);
}

TEST(BatchSampler, WalksEpochs) {
  BatchSampler s(10, 5, 3);
  EXPECT_EQ(s.batches_per_epoch(), 2u);
  const auto e0 = batch_iter(10, 5, 3, 0), e1 = batch_iter(10, 5, 3, 1);
  EXPECT_EQ(s.indices(0), e0[0]);
  EXPECT_EQ(s.indices(1), e0[1]);
  EXPECT_EQ(s.indices(3), e1[1]);
  EXPECT_EQ(s.indices(0), e0[0]);
}

TEST(MakeBatch, StacksPairs) {
  SyntheticSpec s;
  s.n_val = 8;
  const Dataset d(s, Split::Val);
  const std::vector<std::size_t> idx{5, 2};
  const Batch b = make_batch(d, idx);
  EXPECT_EQ(b.images.shape(), (Shape{2, 16, 12}));
  EXPECT_EQ(b.tokens.batch, 2u);
  EXPECT_EQ(b.tokens.length, s.max_len);
  EXPECT_TRUE(std::equal(b.tokens.row(0).begin(), b.tokens.row(0).end(), d[5].tokens.begin()));
  EXPECT_EQ(b.images[16 * 12], d[2].image[0]);
}

namespace {

// Nearest-centroid probe of attribute k's value from the pixels of region k.
double probe_accuracy(const SyntheticSpec& s, Real noise) {
  const std::size_t n = 2000, dim = s.num_patches() * s.patch_dim();
  std::vector<std::vector<std::size_t>> latents;
  std::vector<Tensor> images;
  for (std::size_t i = 0; i < n; ++i) {
    Pair p = generate_pair(s, Split::Train, i);
    images.push_back(render_image(s, p.latent, noise, 1000 + i));
    latents.push_back(p.latent);
  }
  const std::size_t pd = s.patch_dim();
  std::size_t correct = 0, total = 0;
  for (std::size_t k = 0; k < s.attributes; ++k) {
    std::vector<bool> in_region(dim);
    for (std::size_t j = 0; j < dim; ++j) in_region[j] = region_of(s, j / pd / s.grid, j / pd % s.grid) == k;
    std::vector<std::vector<double>> centroid(s.values, std::vector<double>(dim));
    std::vector<std::size_t> count(s.values);
    for (std::size_t i = 0; i < n / 2; ++i) {
      ++count[latents[i][k]];
      for (std::size_t j = 0; j < dim; ++j) centroid[latents[i][k]][j] += images[i][j];
    }
    for (std::size_t v = 0; v < s.values; ++v)
      for (double& c : centroid[v]) c /= double(std::max<std::size_t>(count[v], 1));
    for (std::size_t i = n / 2; i < n; ++i) {
      std::size_t best = 0;
      double best_d = 1e300;
      for (std::size_t v = 0; v < s.values; ++v) {
        double d = 0;
        for (std::size_t j = 0; j < dim; ++j)
          if (in_region[j]) d += (images[i][j] - centroid[v][j]) * (images[i][j] - centroid[v][j]);
        if (d < best_d) best_d = d, best = v;
      }
      correct += best == latents[i][k];
      ++total;
    }
  }
  return double(correct) / double(total);
}

}  // namespace

TEST(Separability, NoiselessImagesAreLinearlyDecodable) { EXPECT_EQ(probe_accuracy(SyntheticSpec{}, 0), 1.0); }

TEST(Separability, DefaultNoiseStaysDecodable) { EXPECT_GE(probe_accuracy(SyntheticSpec{}, 0.1), 0.95); }
