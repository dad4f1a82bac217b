#include "clipmap/model.hpp"

#include <algorithm>
#include <cmath>

#include "clipmap/errors.hpp"
#include "clipmap/rng.hpp"

namespace clipmap {

namespace {
constexpr Real kLnEps = Real(1e-5);
constexpr Real kInitLogitScale = 50;
}  // namespace

std::string tower_name(Tower t) { return t == Tower::Image ? "image" : "text"; }

void EncoderConfig::validate() const {
  const std::string who = tower_name(tower) + " encoder: ";
  if (width == 0 || depth == 0 || heads == 0 || ffn_mult == 0 || embed_dim == 0)
    throw ConfigError(who + "all sizes must be >= 1");
  if (width % heads != 0)
    throw ConfigError(who + "width " + std::to_string(width) + " not divisible by heads " + std::to_string(heads));
  if (tower == Tower::Text && (vocab == 0 || max_len == 0)) throw ConfigError(who + "vocab and max_len must be >= 1");
  if (tower == Tower::Image && (grid == 0 || patch == 0 || channels == 0))
    throw ConfigError(who + "grid, patch and channels must be >= 1");
}

std::vector<std::pair<std::string, Shape>> EncoderWeights::expected_shapes() const {
  const EncoderConfig& c = config;
  const std::size_t d = c.width, f = c.ffn_width();
  EncoderParams<Shape> s;
  s.embed = c.tower == Tower::Image ? Shape{d, c.patch_dim()} : Shape{c.vocab, d};
  s.pos = {c.positions(), d};
  s.cls = {1, d};
  s.blocks.resize(c.depth);
  for (auto& b : s.blocks) {
    b.ln1_g = b.ln1_b = b.ln2_g = b.ln2_b = {d};
    b.wq = b.wk = b.wv = b.wo = {d, d};
    b.bq = b.bk = b.bv = b.bo = {d};
    b.fc1_w = {f, d};
    b.fc1_b = {f};
    b.fc2_w = {d, f};
    b.fc2_b = {d};
  }
  s.lnf_g = s.lnf_b = {d};
  s.proj = {c.embed_dim, d};
  std::vector<std::pair<std::string, Shape>> out;
  for_each_param(c.tower, s, [&](const std::string& name, const Shape& shape) { out.emplace_back(name, shape); });
  return out;
}

void EncoderWeights::check_shapes() const {
  config.validate();
  if (params.blocks.size() != config.depth)
    throw DimensionError(tower_name(config.tower) + " encoder: " + std::to_string(params.blocks.size()) +
                         " blocks, config depth " + std::to_string(config.depth));
  auto expected = expected_shapes();
  std::size_t i = 0;
  for_each_param(config.tower, params, [&](const std::string& name, const Tensor& t) {
    if (t.shape() != expected[i].second)
      throw DimensionError(tower_name(config.tower) + "." + name + ": shape " + shape_str(t.shape()) +
                           ", expected " + shape_str(expected[i].second));
    ++i;
  });
}

std::size_t EncoderWeights::param_count() const {
  std::size_t n = 0;
  for_each_param(config.tower, params, [&](const std::string&, const Tensor& t) { n += t.numel(); });
  return n;
}

Real ClipModel::logit_scale() const { return std::min(std::exp(log_logit_scale.item()), kMaxLogitScale); }

std::vector<std::pair<std::string, Tensor*>> ClipModel::named_params() {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (EncoderWeights* enc : {&image, &text}) {
    const std::string prefix = tower_name(enc->config.tower) + ".";
    for_each_param(enc->config.tower, enc->params,
                   [&](const std::string& name, Tensor& t) { out.emplace_back(prefix + name, &t); });
  }
  out.emplace_back("logit_scale", &log_logit_scale);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> ClipModel::named_params() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (auto& [name, t] : const_cast<ClipModel*>(this)->named_params()) out.emplace_back(name, t);
  return out;
}

void ClipModel::set_requires_grad(bool on) {
  for (auto& [name, t] : named_params()) t->set_requires_grad(on);
}

void ClipModel::zero_grad() {
  for (auto& [name, t] : named_params()) t->zero_grad();
}

EncoderWeights init_encoder(const EncoderConfig& config, Rng& rng) {
  config.validate();
  EncoderWeights w;
  w.config = config;
  const Real d = Real(config.width);
  const Real attn_std = 1 / std::sqrt(d);
  const Real out_std = attn_std / std::sqrt(Real(2 * config.depth));
  const Real fc1_std = 1 / std::sqrt(2 * d);

  auto shapes = w.expected_shapes();
  w.params.blocks.resize(config.depth);
  std::size_t i = 0;
  for_each_param(config.tower, w.params, [&](const std::string&, Tensor& t) { t = Tensor(shapes[i++].second); });

  auto& p = w.params;
  if (config.tower == Tower::Image) {
    rng.fill_normal(p.embed, 1 / std::sqrt(Real(config.patch_dim())));
    rng.fill_normal(p.cls, attn_std);
    rng.fill_normal(p.pos, attn_std);
  } else {
    rng.fill_normal(p.embed, Real(0.02));
    rng.fill_normal(p.pos, Real(0.01));
  }
  for (auto& b : p.blocks) {
    for (Tensor* g : {&b.ln1_g, &b.ln2_g}) std::fill(g->data().begin(), g->data().end(), Real(1));
    rng.fill_normal(b.wq, attn_std);
    rng.fill_normal(b.wk, attn_std);
    rng.fill_normal(b.wv, attn_std);
    rng.fill_normal(b.wo, out_std);
    rng.fill_normal(b.fc1_w, fc1_std);
    rng.fill_normal(b.fc2_w, out_std);
  }
  std::fill(p.lnf_g.data().begin(), p.lnf_g.data().end(), Real(1));
  rng.fill_normal(p.proj, attn_std);
  w.check_shapes();
  return w;
}

ClipModel init_clip(const EncoderConfig& image, const EncoderConfig& text, Rng& rng) {
  if (image.tower != Tower::Image || text.tower != Tower::Text)
    throw ConfigError("init_clip: tower kinds swapped");
  if (image.embed_dim != text.embed_dim) throw ConfigError("init_clip: towers disagree on embed_dim");
  ClipModel m;
  m.image = init_encoder(image, rng);
  m.text = init_encoder(text, rng);
  m.log_logit_scale = Tensor::scalar(std::log(kInitLogitScale));
  return m;
}

EncoderParams<ad::Var> bind(ad::Tape& tape, EncoderWeights& weights) {
  EncoderParams<ad::Var> out;
  out.blocks.resize(weights.params.blocks.size());
  zip_params(weights.config.tower, out, weights.params,
             [&](const std::string&, ad::Var& slot, Tensor& t) { slot = tape.leaf(t); });
  return out;
}

EncoderParams<ad::Var> bind_constant(ad::Tape& tape, const EncoderWeights& weights) {
  EncoderParams<ad::Var> out;
  out.blocks.resize(weights.params.blocks.size());
  zip_params(weights.config.tower, out, weights.params,
             [&](const std::string&, ad::Var& slot, const Tensor& t) { slot = tape.constant(t); });
  return out;
}

namespace {

ad::Var transformer_block(ad::Var x, const BlockParams<ad::Var>& b, std::size_t batch, std::size_t heads,
                          bool causal) {
  ad::Var h = ad::layer_norm(x, b.ln1_g, b.ln1_b, kLnEps);
  ad::Var q = ad::linear(h, b.wq, b.bq);
  ad::Var k = ad::linear(h, b.wk, b.bk);
  ad::Var v = ad::linear(h, b.wv, b.bv);
  ad::Var a = ad::attention(q, k, v, batch, heads, causal);
  x = ad::add(x, ad::linear(a, b.wo, b.bo));
  h = ad::layer_norm(x, b.ln2_g, b.ln2_b, kLnEps);
  h = ad::gelu(ad::linear(h, b.fc1_w, b.fc1_b));
  return ad::add(x, ad::linear(h, b.fc2_w, b.fc2_b));
}

ad::Var pool_and_project(ad::Var x, const EncoderParams<ad::Var>& p, std::vector<std::size_t> rows) {
  ad::Var pooled = ad::gather_rows(x, std::move(rows));
  pooled = ad::layer_norm(pooled, p.lnf_g, p.lnf_b, kLnEps);
  return ad::l2_normalize_rows(ad::matmul_nt(pooled, p.proj));
}

}  // namespace

ad::Var encode_text(const EncoderConfig& config, const EncoderParams<ad::Var>& params, const TokenBatch& tokens) {
  if (tokens.batch == 0 || tokens.ids.size() != tokens.batch * tokens.length)
    throw InputError("encode_text: malformed token batch");
  if (tokens.length > config.max_len)
    throw InputError("encode_text: sequence length " + std::to_string(tokens.length) + " exceeds max_len " +
                     std::to_string(config.max_len));
  // Causal attention makes every position at or before the pooled one
  // independent of what follows, so the batch is cut after the last pooled
  // position.
  std::vector<std::size_t> pool(tokens.batch);
  for (std::size_t b = 0; b < tokens.batch; ++b) {
    auto row = tokens.row(b);
    std::size_t last = tokens.length;
    for (std::size_t t = 0; t < row.size(); ++t) {
      if (row[t] >= config.vocab)
        throw InputError("encode_text: token id " + std::to_string(row[t]) + " out of range for vocab " +
                         std::to_string(config.vocab));
      if (row[t] == tokens::kEos) {
        last = t;
        break;
      }
      if (row[t] != tokens::kPad) last = t;
    }
    if (last == tokens.length) throw InputError("encode_text: sequence " + std::to_string(b) + " is all padding");
    pool[b] = last;
  }
  const std::size_t len = *std::max_element(pool.begin(), pool.end()) + 1;
  std::vector<std::size_t> ids;
  ids.reserve(tokens.batch * len);
  for (std::size_t b = 0; b < tokens.batch; ++b)
    for (std::size_t t = 0; t < len; ++t) ids.push_back(tokens.row(b)[t]);
  std::vector<std::size_t> positions(len);
  for (std::size_t t = 0; t < len; ++t) positions[t] = t;

  ad::Var x = ad::gather_rows(params.embed, std::move(ids));
  x = ad::add_periodic_rows(x, ad::gather_rows(params.pos, std::move(positions)));
  for (const auto& block : params.blocks) x = transformer_block(x, block, tokens.batch, config.heads, true);
  std::vector<std::size_t> rows(tokens.batch);
  for (std::size_t b = 0; b < tokens.batch; ++b) rows[b] = b * len + pool[b];
  return pool_and_project(x, params, std::move(rows));
}

ad::Var encode_image(const EncoderConfig& config, const EncoderParams<ad::Var>& params, const Tensor& images) {
  if (images.rank() != 3 || images.dim(1) != config.num_patches() || images.dim(2) != config.patch_dim())
    throw InputError("encode_image: batch shape " + shape_str(images.shape()) + " does not match [B x " +
                     std::to_string(config.num_patches()) + " x " + std::to_string(config.patch_dim()) + "]");
  const std::size_t batch = images.dim(0), patches = config.num_patches();
  ad::Tape& tape = *params.embed.tape();
  ad::Var x = tape.constant(images.reshaped({batch * patches, config.patch_dim()}));
  x = ad::matmul_nt(x, params.embed);
  x = ad::prepend_rows(x, params.cls, patches);
  x = ad::add_periodic_rows(x, params.pos);
  for (const auto& block : params.blocks) x = transformer_block(x, block, batch, config.heads, false);
  std::vector<std::size_t> rows(batch);
  for (std::size_t b = 0; b < batch; ++b) rows[b] = b * (patches + 1);
  return pool_and_project(x, params, std::move(rows));
}

Tensor encode_text(const ClipModel& model, const TokenBatch& tokens) {
  ad::Tape tape;
  auto p = bind_constant(tape, model.text);
  return encode_text(model.text.config, p, tokens).value();
}

Tensor encode_image(const ClipModel& model, const Tensor& images) {
  ad::Tape tape;
  auto p = bind_constant(tape, model.image);
  return encode_image(model.image.config, p, images).value();
}

LogitPair clip_logits(const Tensor& image_emb, const Tensor& text_emb, Real scale) {
  if (!(scale > 0) || !std::isfinite(scale)) throw NumericError("clip_logits: logit scale is not a positive finite number");
  if (image_emb.rank() != 2 || image_emb.shape() != text_emb.shape())
    throw DimensionError("clip_logits: " + shape_str(image_emb.shape()) + " vs " + shape_str(text_emb.shape()));
  LogitPair out;
  out.image_to_text = ad::matmul(image_emb, text_emb.transposed());
  for (Real& v : out.image_to_text.data()) v *= scale;
  out.text_to_image = out.image_to_text.transposed();
  return out;
}

GraphLogits clip_logits(ad::Var image_emb, ad::Var text_emb, ad::Var scale) {
  if (!(scale.value().item() > 0) || !std::isfinite(scale.value().item()))
    throw NumericError("clip_logits: logit scale is not a positive finite number");
  ad::Var i2t = ad::scale_by(ad::matmul_nt(image_emb, text_emb), scale);
  return {i2t, ad::transpose(i2t)};
}

std::size_t closed_form_param_count(const EncoderConfig& c) {
  const std::size_t d = c.width, f = c.ffn_mult;
  const std::size_t block = (4 + 2 * f) * d * d + (9 + f) * d;
  const std::size_t input = c.tower == Tower::Image ? d * c.patch_dim() + (c.num_patches() + 1) * d + d
                                                    : c.vocab * d + c.max_len * d;
  return input + c.depth * block + 2 * d + c.embed_dim * d;
}

std::uint64_t checksum(const ClipModel& model) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](const void* p, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [name, t] : model.named_params()) {
    mix(name.data(), name.size());
    mix(t->data().data(), t->numel() * sizeof(Real));
  }
  return h;
}

}  // namespace clipmap
