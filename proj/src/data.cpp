#include "clipmap/data.hpp"

#include <cmath>
#include <numbers>
#include <numeric>

#include "clipmap/errors.hpp"
#include "clipmap/rng.hpp"

namespace clipmap {

void SyntheticSpec::validate() const {
  if (attributes == 0) throw ConfigError("data.attributes must be >= 1");
  if (values == 0) throw ConfigError("data.values must be >= 1");
  if (grid == 0 || patch == 0 || channels == 0) throw ConfigError("image grid, patch, and channels must be >= 1");
  if (attributes > grid * grid) throw ConfigError("data.attributes exceeds the number of patches");
  if (max_len < attributes + 2) throw ConfigError("model.max_len too short for BOS, attributes, and EOS");
  if (!(noise >= 0)) throw ConfigError("data.noise must be >= 0");
  if (n_train == 0 || n_val == 0) throw ConfigError("data.train and data.val must be >= 1");
}

std::string split_name(Split s) { return s == Split::Train ? "train" : "val"; }

std::size_t region_of(const SyntheticSpec& spec, std::size_t row, std::size_t col) {
  return ((row * spec.grid + col) * spec.attributes) / spec.num_patches();
}

std::uint32_t value_token(const SyntheticSpec& spec, std::size_t attribute, std::size_t value) {
  if (attribute >= spec.attributes || value >= spec.values)
    throw InputError("attribute " + std::to_string(attribute) + " value " + std::to_string(value) +
                     " out of range");
  return tokens::kFirstValue + static_cast<std::uint32_t>(attribute * spec.values + value);
}

namespace {

Real palette(const SyntheticSpec& spec, std::size_t value, std::size_t channel) {
  const Real phase = Real(2) * std::numbers::pi_v<Real> * Real(value) / Real(spec.values);
  switch (channel % 3) {
    case 0: return spec.values > 1 ? Real(-1) + Real(2) * Real(value) / Real(spec.values - 1) : Real(0);
    case 1: return std::cos(phase);
    default: return std::sin(phase);
  }
}

}  // namespace

Tensor render_image(const SyntheticSpec& spec, std::span<const std::size_t> latent, Real noise,
                    std::uint64_t noise_seed) {
  if (latent.size() != spec.attributes) throw InputError("render_image: latent has wrong length");
  Rng rng(noise_seed);
  Tensor img({spec.num_patches(), spec.patch_dim()});
  for (std::size_t r = 0; r < spec.grid; ++r)
    for (std::size_t c = 0; c < spec.grid; ++c) {
      const std::size_t v = latent[region_of(spec, r, c)];
      Real* px = img.data().data() + (r * spec.grid + c) * spec.patch_dim();
      for (std::size_t i = 0; i < spec.patch * spec.patch; ++i)
        for (std::size_t ch = 0; ch < spec.channels; ++ch)
          px[i * spec.channels + ch] = palette(spec, v, ch) + rng.normal(0, noise);
    }
  return img;
}

std::vector<std::uint32_t> caption_tokens(const SyntheticSpec& spec, std::span<const std::size_t> latent) {
  std::vector<std::uint32_t> ids(spec.max_len, tokens::kPad);
  ids[0] = tokens::kBos;
  for (std::size_t k = 0; k < spec.attributes; ++k) ids[1 + k] = value_token(spec, k, latent[k]);
  ids[1 + spec.attributes] = tokens::kEos;
  return ids;
}

Pair generate_pair(const SyntheticSpec& spec, Split split, std::size_t index) {
  Rng rng = Rng::stream(spec.seed, "data." + split_name(split), index);
  Pair p;
  p.latent.resize(spec.attributes);
  for (auto& v : p.latent) v = rng.below(spec.values);
  p.image = render_image(spec, p.latent, spec.noise, rng.engine()());
  p.tokens = caption_tokens(spec, p.latent);
  return p;
}

std::vector<std::uint32_t> prompt_for_class(const SyntheticSpec& spec, std::size_t attribute, std::size_t value) {
  std::vector<std::uint32_t> ids(spec.max_len, tokens::kPad);
  ids[0] = tokens::kBos;
  for (std::size_t k = 0; k < spec.attributes; ++k) ids[1 + k] = tokens::kWildcard;
  ids[1 + attribute] = value_token(spec, attribute, value);
  ids[1 + spec.attributes] = tokens::kEos;
  return ids;
}

PromptClass parse_prompt(const SyntheticSpec& spec, std::span<const std::uint32_t> ids) {
  auto bad = [] { return InputError("parse_prompt: not a class prompt"); };
  if (ids.size() < spec.attributes + 2 || ids[0] != tokens::kBos || ids[1 + spec.attributes] != tokens::kEos)
    throw bad();
  PromptClass out;
  bool found = false;
  for (std::size_t k = 0; k < spec.attributes; ++k) {
    const std::uint32_t t = ids[1 + k];
    if (t == tokens::kWildcard) continue;
    if (found || t < tokens::kFirstValue) throw bad();
    const std::size_t code = t - tokens::kFirstValue;
    if (code / spec.values != k || code >= spec.attributes * spec.values) throw bad();
    out = {k, code % spec.values};
    found = true;
  }
  if (!found) throw bad();
  for (std::size_t i = spec.attributes + 2; i < ids.size(); ++i)
    if (ids[i] != tokens::kPad) throw bad();
  return out;
}

Dataset::Dataset(const SyntheticSpec& spec, Split split) : spec_(spec), split_(split) {
  spec_.validate();
  const std::size_t n = split == Split::Train ? spec.n_train : spec.n_val;
  pairs_.reserve(n);
  for (std::size_t i = 0; i < n; ++i) pairs_.push_back(generate_pair(spec_, split, i));
}

Batch make_batch(std::span<const Pair> pairs) {
  if (pairs.empty()) throw InputError("make_batch: empty batch");
  const Shape img = pairs.front().image.shape();
  const std::size_t len = pairs.front().tokens.size();
  Batch b;
  b.images = Tensor({pairs.size(), img[0], img[1]});
  b.tokens.batch = pairs.size();
  b.tokens.length = len;
  b.tokens.ids.reserve(pairs.size() * len);
  const std::size_t per = pairs.front().image.numel();
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    std::copy(pairs[i].image.data().begin(), pairs[i].image.data().end(), b.images.data().begin() + i * per);
    b.tokens.ids.insert(b.tokens.ids.end(), pairs[i].tokens.begin(), pairs[i].tokens.end());
  }
  return b;
}

Batch make_batch(const Dataset& data, std::span<const std::size_t> indices) {
  std::vector<Pair> pairs;
  pairs.reserve(indices.size());
  for (std::size_t i : indices) {
    if (i >= data.size()) throw InputError("make_batch: index " + std::to_string(i) + " out of range");
    pairs.push_back(data[i]);
  }
  Batch b = make_batch(pairs);
  b.indices.assign(indices.begin(), indices.end());
  return b;
}

std::vector<std::vector<std::size_t>> batch_iter(std::size_t n, std::size_t batch, std::uint64_t seed,
                                                 std::uint64_t epoch) {
  if (batch == 0 || batch > n)
    throw ConfigError("batch size " + std::to_string(batch) + " must lie in [1, " + std::to_string(n) + "]");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng = Rng::stream(seed, "shuffle", epoch);
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start + batch <= n; start += batch)
    out.emplace_back(perm.begin() + start, perm.begin() + start + batch);
  return out;
}

BatchSampler::BatchSampler(std::size_t n, std::size_t batch, std::uint64_t seed) : n_(n), batch_(batch), seed_(seed) {
  if (batch == 0 || batch > n)
    throw ConfigError("batch size " + std::to_string(batch) + " must lie in [1, " + std::to_string(n) + "]");
}

const std::vector<std::size_t>& BatchSampler::indices(std::uint64_t step) {
  const std::uint64_t epoch = step / batches_per_epoch();
  if (epoch != epoch_) {
    order_ = batch_iter(n_, batch_, seed_, epoch);
    epoch_ = epoch;
  }
  return order_[step % batches_per_epoch()];
}

}  // namespace clipmap
