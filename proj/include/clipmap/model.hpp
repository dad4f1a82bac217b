#pragma once

// Two-tower CLIP-style encoder: a patch transformer for images and a causal
// token transformer for text, both pre-norm, projecting into a shared
// L2-normalized embedding space.
//
// Weight layout (out × in, row-major):
//   text  embed [vocab × D], pos [max_len × D]
//   image embed [D × patch_dim], pos [(grid²+1) × D], cls [1 × D]
//   block wq/wk/wv/wo [D × D], fc1_w [f·D × D], fc2_w [D × f·D]
//   proj  [E × D]

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "clipmap/autodiff.hpp"
#include "clipmap/tensor.hpp"

namespace clipmap {

class Rng;

enum class Tower { Image, Text };

std::string tower_name(Tower t);

struct EncoderConfig {
  Tower tower = Tower::Text;
  std::size_t width = 64;
  std::size_t depth = 8;
  std::size_t heads = 4;
  std::size_t ffn_mult = 4;
  std::size_t embed_dim = 32;
  // text input
  std::size_t vocab = 64;
  std::size_t max_len = 16;
  // image input
  std::size_t grid = 4;
  std::size_t patch = 2;
  std::size_t channels = 3;

  std::size_t patch_dim() const { return patch * patch * channels; }
  std::size_t num_patches() const { return grid * grid; }
  // Positions carried by the positional table.
  std::size_t positions() const { return tower == Tower::Image ? num_patches() + 1 : max_len; }
  std::size_t ffn_width() const { return ffn_mult * width; }

  // Throws ConfigError when sizes are zero or width % heads != 0.
  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

template <class T>
struct BlockParams {
  T ln1_g, ln1_b;
  T wq, bq, wk, bk, wv, bv, wo, bo;
  T ln2_g, ln2_b;
  T fc1_w, fc1_b, fc2_w, fc2_b;
};

template <class T>
struct EncoderParams {
  T embed;
  T pos;
  T cls;  // image tower only
  std::vector<BlockParams<T>> blocks;
  T lnf_g, lnf_b;
  T proj;
};

// Visits matching members of two blocks as fn(name, a.member, b.member).
template <class A, class B, class Fn>
void zip_block_params(A& a, B& b, Fn&& fn) {
  fn("ln1_g", a.ln1_g, b.ln1_g);
  fn("ln1_b", a.ln1_b, b.ln1_b);
  fn("wq", a.wq, b.wq);
  fn("bq", a.bq, b.bq);
  fn("wk", a.wk, b.wk);
  fn("bk", a.bk, b.bk);
  fn("wv", a.wv, b.wv);
  fn("bv", a.bv, b.bv);
  fn("wo", a.wo, b.wo);
  fn("bo", a.bo, b.bo);
  fn("ln2_g", a.ln2_g, b.ln2_g);
  fn("ln2_b", a.ln2_b, b.ln2_b);
  fn("fc1_w", a.fc1_w, b.fc1_w);
  fn("fc1_b", a.fc1_b, b.fc1_b);
  fn("fc2_w", a.fc2_w, b.fc2_w);
  fn("fc2_b", a.fc2_b, b.fc2_b);
}

// Visits matching tensors of two encoders with dotted names such as
// "blocks.3.wq". The cls slot is skipped for text towers. `b.blocks` must be
// at least as long as `a.blocks`.
template <class A, class B, class Fn>
void zip_params(Tower tower, A& a, B& b, Fn&& fn) {
  fn(std::string("embed"), a.embed, b.embed);
  fn(std::string("pos"), a.pos, b.pos);
  if (tower == Tower::Image) fn(std::string("cls"), a.cls, b.cls);
  for (std::size_t l = 0; l < a.blocks.size(); ++l) {
    const std::string prefix = "blocks." + std::to_string(l) + ".";
    zip_block_params(a.blocks[l], b.blocks[l],
                     [&](const char* name, auto& x, auto& y) { fn(prefix + name, x, y); });
  }
  fn(std::string("ln_final.g"), a.lnf_g, b.lnf_g);
  fn(std::string("ln_final.b"), a.lnf_b, b.lnf_b);
  fn(std::string("proj"), a.proj, b.proj);
}

template <class P, class Fn>
void for_each_param(Tower tower, P& p, Fn&& fn) {
  zip_params(tower, p, p, [&](const std::string& name, auto& x, auto&) { fn(name, x); });
}

struct EncoderWeights {
  EncoderConfig config;
  EncoderParams<Tensor> params;

  // Shape every tensor must have under `config`, keyed by parameter name.
  std::vector<std::pair<std::string, Shape>> expected_shapes() const;
  // Throws DimensionError naming the first mismatching tensor.
  void check_shapes() const;
  std::size_t param_count() const;
};

struct ClipModel {
  EncoderWeights image;
  EncoderWeights text;
  Tensor log_logit_scale = Tensor::scalar(0);

  static constexpr Real kMaxLogitScale = 100;

  Real logit_scale() const;
  // All learnable tensors with tower-qualified names ("image.blocks.0.wq",
  // ..., "logit_scale").
  std::vector<std::pair<std::string, Tensor*>> named_params();
  std::vector<std::pair<std::string, const Tensor*>> named_params() const;
  void set_requires_grad(bool on);
  void zero_grad();
};

// Seeded initialization with CLIP-style scales and a reciprocal temperature of 50.
EncoderWeights init_encoder(const EncoderConfig& config, Rng& rng);
ClipModel init_clip(const EncoderConfig& image, const EncoderConfig& text, Rng& rng);

// Token ids, one row per sequence. Id 0 pads, 2 ends the sequence.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::uint32_t> ids;  // [batch × length]

  std::span<const std::uint32_t> row(std::size_t b) const { return {ids.data() + b * length, length}; }
};

namespace tokens {
inline constexpr std::uint32_t kPad = 0;
inline constexpr std::uint32_t kBos = 1;
inline constexpr std::uint32_t kEos = 2;
inline constexpr std::uint32_t kWildcard = 3;
inline constexpr std::uint32_t kFirstValue = 4;
}  // namespace tokens

// Images are [batch × grid² × patch_dim] tensors of flattened patches.

// Graph-level forward passes used by training; return [B × E] normalized rows.
ad::Var encode_text(const EncoderConfig& config, const EncoderParams<ad::Var>& params, const TokenBatch& tokens);
ad::Var encode_image(const EncoderConfig& config, const EncoderParams<ad::Var>& params, const Tensor& images);

EncoderParams<ad::Var> bind(ad::Tape& tape, EncoderWeights& weights);
EncoderParams<ad::Var> bind_constant(ad::Tape& tape, const EncoderWeights& weights);

// Value-level forward passes.
Tensor encode_text(const ClipModel& model, const TokenBatch& tokens);
Tensor encode_image(const ClipModel& model, const Tensor& images);

struct LogitPair {
  Tensor image_to_text;  // [B × B]
  Tensor text_to_image;  // transpose of image_to_text
};

LogitPair clip_logits(const Tensor& image_emb, const Tensor& text_emb, Real scale);

struct GraphLogits {
  ad::Var image_to_text;
  ad::Var text_to_image;
};

GraphLogits clip_logits(ad::Var image_emb, ad::Var text_emb, ad::Var scale);

// Closed-form learnable-scalar count of one tower.
std::size_t closed_form_param_count(const EncoderConfig& config);

// Order-sensitive FNV-1a over every parameter's bytes.
std::uint64_t checksum(const ClipModel& model);

}  // namespace clipmap
