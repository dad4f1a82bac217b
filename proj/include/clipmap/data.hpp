#pragma once

// Procedural image-caption pairs. A latent assigns each of K attributes one of
// V values. The image paints attribute k's region of the patch grid with a
// colour chosen by its value; the caption lists the value tokens in order.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "clipmap/model.hpp"
#include "clipmap/tensor.hpp"

namespace clipmap {

struct SyntheticSpec {
  std::size_t attributes = 4;  // K
  std::size_t values = 12;     // V
  std::size_t grid = 4;
  std::size_t patch = 2;
  std::size_t channels = 3;
  std::size_t max_len = 16;
  Real noise = Real(0.1);
  std::uint64_t seed = 0;
  std::size_t n_train = 8192;
  std::size_t n_val = 256;

  std::size_t patch_dim() const { return patch * patch * channels; }
  std::size_t num_patches() const { return grid * grid; }
  // Smallest vocabulary holding every token the generator emits.
  std::size_t vocab_needed() const { return tokens::kFirstValue + attributes * values; }

  // Throws ConfigError on impossible sizes.
  void validate() const;
};

enum class Split { Train, Val };

std::string split_name(Split s);

struct Pair {
  Tensor image;  // [grid² × patch_dim]
  std::vector<std::uint32_t> tokens;  // max_len ids
  std::vector<std::size_t> latent;  // K values
};

// Pure in (spec, split, index).
Pair generate_pair(const SyntheticSpec& spec, Split split, std::size_t index);

// Attribute owning patch (row, col): contiguous raster chunks of the grid.
std::size_t region_of(const SyntheticSpec& spec, std::size_t row, std::size_t col);

Tensor render_image(const SyntheticSpec& spec, std::span<const std::size_t> latent, Real noise, std::uint64_t noise_seed);
std::vector<std::uint32_t> caption_tokens(const SyntheticSpec& spec, std::span<const std::size_t> latent);

std::uint32_t value_token(const SyntheticSpec& spec, std::size_t attribute, std::size_t value);

struct PromptClass {
  std::size_t attribute = 0;
  std::size_t value = 0;
};

// Caption with attribute k fixed to v and every other slot set to the wildcard.
std::vector<std::uint32_t> prompt_for_class(const SyntheticSpec& spec, std::size_t attribute, std::size_t value);
// Inverse of prompt_for_class; InputError for anything else.
PromptClass parse_prompt(const SyntheticSpec& spec, std::span<const std::uint32_t> tokens);

class Dataset {
 public:
  Dataset(const SyntheticSpec& spec, Split split);

  const SyntheticSpec& spec() const { return spec_; }
  Split split() const { return split_; }
  std::size_t size() const { return pairs_.size(); }
  const Pair& operator[](std::size_t i) const { return pairs_[i]; }

 private:
  SyntheticSpec spec_;
  Split split_;
  std::vector<Pair> pairs_;
};

struct Batch {
  std::vector<std::size_t> indices;
  Tensor images;  // [B × grid² × patch_dim]
  TokenBatch tokens;
};

Batch make_batch(const Dataset& data, std::span<const std::size_t> indices);
Batch make_batch(std::span<const Pair> pairs);

// Seeded permutation of [0, n) for one epoch cut into full batches; the
// trailing n mod batch indices are dropped.
std::vector<std::vector<std::size_t>> batch_iter(std::size_t n, std::size_t batch, std::uint64_t seed,
                                                 std::uint64_t epoch);

// Maps a global step onto (epoch, batch-in-epoch) and caches the epoch order.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch, std::uint64_t seed);
  const std::vector<std::size_t>& indices(std::uint64_t step);
  std::size_t batches_per_epoch() const { return n_ / batch_; }

 private:
  std::size_t n_, batch_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = ~std::uint64_t{0};
  std::vector<std::vector<std::size_t>> order_;
};

}  // namespace clipmap
