#include "clipmap/mapping.hpp"

#include <cmath>

#include "clipmap/errors.hpp"
#include "clipmap/rng.hpp"

namespace clipmap {

CompressionSpec CompressionSpec::uniform(const ClipModel& model, std::size_t width, std::size_t depth) {
  CompressionSpec s;
  s.image = {model.image.config.width, width, model.image.config.depth, depth};
  s.text = {model.text.config.width, width, model.text.config.depth, depth};
  return s;
}

void CompressionSpec::validate(const ClipModel& model) const {
  for (const EncoderWeights* enc : {&model.image, &model.text}) {
    const TowerCompression& t = enc->config.tower == Tower::Image ? image : text;
    const std::string who = tower_name(enc->config.tower) + " compression: ";
    if (t.source_width != enc->config.width || t.source_depth != enc->config.depth)
      throw DimensionError(who + "source " + std::to_string(t.source_width) + "x" + std::to_string(t.source_depth) +
                           " does not match model " + std::to_string(enc->config.width) + "x" +
                           std::to_string(enc->config.depth));
    if (t.target_width == 0 || t.target_depth == 0) throw ConfigError(who + "target sizes must be >= 1");
    if (t.target_width > t.source_width || t.target_depth > t.source_depth)
      throw ConfigError(who + "target exceeds source");
    if (t.target_width % enc->config.heads != 0)
      throw ConfigError(who + "target width " + std::to_string(t.target_width) + " not divisible by " +
                        std::to_string(enc->config.heads) + " heads");
  }
}

std::vector<std::pair<std::string, Tensor*>> CompressionMaps::named_params() {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (auto [prefix, tower] : {std::pair{"image.", &image}, std::pair{"text.", &text}})
    zip_tower_maps(*tower, *tower,
                   [&, p = std::string(prefix)](const std::string& name, Tensor& t, Tensor&) {
                     out.emplace_back(p + name, &t);
                   });
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> CompressionMaps::named_params() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (auto& [name, t] : const_cast<CompressionMaps*>(this)->named_params()) out.emplace_back(name, t);
  return out;
}

void CompressionMaps::set_requires_grad(bool on) {
  for (auto& [name, t] : named_params()) t->set_requires_grad(on);
}

std::size_t CompressionMaps::param_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named_params()) n += t->numel();
  return n;
}

std::string map_init_name(MapInit m) {
  switch (m) {
    case MapInit::Diagonal: return "diag";
    case MapInit::Random: return "random";
    case MapInit::FanIn: return "fan_in";
    case MapInit::FanAvg: return "fan_avg";
  }
  return "?";
}

MapInit parse_map_init(const std::string& name) {
  for (MapInit m : {MapInit::Diagonal, MapInit::Random, MapInit::FanIn, MapInit::FanAvg})
    if (map_init_name(m) == name) return m;
  throw ConfigError("unknown map initialization '" + name + "' (expected diag, random, fan_in, fan_avg)");
}

namespace {

void check_kron_shapes(const Shape& w, const Shape& f_out, const Shape& f_in) {
  if (w.size() != 2 || f_out.size() != 2 || f_in.size() != 2 || f_out[1] != w[0] || f_in[1] != w[1])
    throw DimensionError("kron_map_apply: W " + shape_str(w) + " with F_out " + shape_str(f_out) + " and F_in " +
                         shape_str(f_in));
}

}  // namespace

Tensor kron_map_apply(const Tensor& w, const Tensor& f_out, const Tensor& f_in) {
  check_kron_shapes(w.shape(), f_out.shape(), f_in.shape());
  return ad::matmul(ad::matmul(f_out, w), f_in.transposed());
}

ad::Var kron_map_apply(ad::Var w, ad::Var f_out, ad::Var f_in) {
  check_kron_shapes(w.shape(), f_out.shape(), f_in.shape());
  return ad::matmul_nt(ad::matmul(f_out, w), f_in);
}

Tensor kronecker(const Tensor& a, const Tensor& b) {
  const std::size_t ar = a.rows(), ac = a.cols(), br = b.rows(), bc = b.cols();
  Tensor r({ar * br, ac * bc});
  for (std::size_t i = 0; i < ar; ++i)
    for (std::size_t j = 0; j < ac; ++j)
      for (std::size_t k = 0; k < br; ++k)
        for (std::size_t l = 0; l < bc; ++l) r.at(i * br + k, j * bc + l) = a.at(i, j) * b.at(k, l);
  return r;
}

Tensor explicit_kron_oracle(const Tensor& f_in, const Tensor& f_out, const Tensor& w) {
  check_kron_shapes(w.shape(), f_out.shape(), f_in.shape());
  for (const Tensor* t : {&f_in, &f_out})
    if (t->rows() > kMaxOracleDim || t->cols() > kMaxOracleDim)
      throw ContractError("explicit_kron_oracle: refusing to materialize factors of shape " + shape_str(t->shape()) +
                          " (cap " + std::to_string(kMaxOracleDim) + ")");
  const Tensor r = kronecker(f_in, f_out);
  const std::size_t out1 = w.rows(), in1 = w.cols(), out2 = f_out.rows(), in2 = f_in.rows();
  // Column-stacking vec: vec(W)[j·rows + i] = W[i, j].
  std::vector<Real> vec(out1 * in1);
  for (std::size_t j = 0; j < in1; ++j)
    for (std::size_t i = 0; i < out1; ++i) vec[j * out1 + i] = w.at(i, j);
  Tensor result({out2, in2});
  for (std::size_t row = 0; row < out2 * in2; ++row) {
    Real acc = 0;
    for (std::size_t c = 0; c < vec.size(); ++c) acc += r.at(row, c) * vec[c];
    result.at(row % out2, row / out2) = acc;
  }
  return result;
}

Tensor diag_inherit_init(std::size_t rows, std::size_t cols, Real off_diag_std, Rng& rng) {
  if (rows > cols)
    throw ContractError("diag_inherit_init: compression maps must be wide, got " + std::to_string(rows) + "x" +
                        std::to_string(cols));
  if (off_diag_std < 0) throw ContractError("diag_inherit_init: negative off-diagonal std");
  Tensor f({rows, cols});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) f.at(i, j) = i == j ? Real(1) : rng.normal(0, off_diag_std);
  return f;
}

Tensor diag_inherit_init(std::size_t rows, std::size_t cols) {
  Rng unused(0);
  return diag_inherit_init(rows, cols, 0, unused);
}

Tensor depth_selector_init(std::size_t target_depth, std::size_t source_depth) {
  if (target_depth == 0 || target_depth > source_depth)
    throw ContractError("depth_selector_init: need 1 <= L2 <= L1, got L2=" + std::to_string(target_depth) +
                        " L1=" + std::to_string(source_depth));
  Tensor l({target_depth, source_depth});
  for (std::size_t r = 0; r < target_depth; ++r) {
    const double pos = double(r + 1) * double(source_depth) / double(target_depth);
    l.at(r, static_cast<std::size_t>(std::lround(pos)) - 1) = 1;
  }
  return l;
}

std::vector<ad::Var> depth_combine(const std::vector<ad::Var>& blocks, ad::Var depth_map) {
  if (depth_map.value().rank() != 2 || depth_map.value().cols() != blocks.size())
    throw DimensionError("depth_combine: map " + shape_str(depth_map.shape()) + " over " +
                         std::to_string(blocks.size()) + " blocks");
  const Shape shape = blocks.front().shape();
  ad::Var combined = ad::matmul(depth_map, ad::stack_flat(blocks));
  std::vector<ad::Var> out;
  out.reserve(depth_map.value().rows());
  for (std::size_t r = 0; r < depth_map.value().rows(); ++r) out.push_back(ad::take_row(combined, r, shape));
  return out;
}

std::vector<Tensor> depth_combine(const std::vector<Tensor>& blocks, const Tensor& depth_map) {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  vars.reserve(blocks.size());
  for (const Tensor& b : blocks) vars.push_back(tape.constant(b));
  if (vars.empty()) throw DimensionError("depth_combine: no blocks");
  std::vector<Tensor> out;
  for (ad::Var v : depth_combine(vars, tape.constant(depth_map))) out.push_back(v.value());
  return out;
}

namespace {

Tensor gaussian_map(std::size_t rows, std::size_t cols, MapInit scheme, Rng& rng) {
  Real std = 0;
  switch (scheme) {
    case MapInit::Random: std = Real(0.02); break;
    case MapInit::FanIn: std = std::sqrt(Real(2) / Real(cols)); break;
    case MapInit::FanAvg: std = std::sqrt(Real(2) / Real(rows + cols)); break;
    case MapInit::Diagonal: break;
  }
  Tensor t({rows, cols});
  rng.fill_normal(t, std);
  return t;
}

TowerMaps init_tower(const TowerCompression& s, std::size_t f, MapInit scheme, Real off_std, Rng& rng) {
  auto width_map = [&](std::size_t rows, std::size_t cols) {
    return scheme == MapInit::Diagonal ? diag_inherit_init(rows, cols, off_std, rng)
                                       : gaussian_map(rows, cols, scheme, rng);
  };
  TowerMaps m;
  m.emb_out = width_map(s.target_width, s.source_width);
  m.layers.resize(s.source_depth);
  for (auto& layer : m.layers) {
    layer.qk_out = width_map(s.target_width, s.source_width);
    layer.v_out = width_map(s.target_width, s.source_width);
    layer.fc1_out = width_map(f * s.target_width, f * s.source_width);
  }
  m.depth = scheme == MapInit::Diagonal ? depth_selector_init(s.target_depth, s.source_depth)
                                        : gaussian_map(s.target_depth, s.source_depth, scheme, rng);
  return m;
}

ad::Var map_vector(ad::Var f, ad::Var v) {
  const std::size_t n = v.value().numel();
  ad::Var col = ad::matmul(f, ad::reshape(v, {n, 1}));
  return ad::reshape(col, {f.value().rows()});
}

void check_tower_maps(const TowerMapsT<ad::Var>& m, const TowerCompression& s, std::size_t f) {
  auto expect = [](ad::Var v, Shape shape, const std::string& name) {
    if (!v.valid() || v.shape() != shape)
      throw DimensionError("maps." + name + ": shape " + (v.valid() ? shape_str(v.shape()) : "<unset>") +
                           ", expected " + shape_str(shape));
  };
  expect(m.emb_out, {s.target_width, s.source_width}, "emb_out");
  if (m.layers.size() != s.source_depth)
    throw DimensionError("maps: " + std::to_string(m.layers.size()) + " layer maps for source depth " +
                         std::to_string(s.source_depth));
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    expect(m.layers[l].qk_out, {s.target_width, s.source_width}, p + "qk_out");
    expect(m.layers[l].v_out, {s.target_width, s.source_width}, p + "v_out");
    expect(m.layers[l].fc1_out, {f * s.target_width, f * s.source_width}, p + "fc1_out");
  }
  expect(m.depth, {s.target_depth, s.source_depth}, "depth");
}

}  // namespace

CompressionMaps init_maps(const CompressionSpec& spec, std::size_t ffn_mult, MapInit scheme, Real off_diag_std,
                          Rng& rng) {
  CompressionMaps maps;
  maps.image = init_tower(spec.image, ffn_mult, scheme, off_diag_std, rng);
  maps.text = init_tower(spec.text, ffn_mult, scheme, off_diag_std, rng);
  return maps;
}

TowerMapsT<ad::Var> bind(ad::Tape& tape, TowerMaps& maps) {
  TowerMapsT<ad::Var> out;
  out.layers.resize(maps.layers.size());
  zip_tower_maps(out, maps, [&](const std::string&, ad::Var& slot, Tensor& t) { slot = tape.leaf(t); });
  return out;
}

TowerMapsT<ad::Var> bind_constant(ad::Tape& tape, const TowerMaps& maps) {
  TowerMapsT<ad::Var> out;
  out.layers.resize(maps.layers.size());
  zip_tower_maps(out, maps, [&](const std::string&, ad::Var& slot, const Tensor& t) { slot = tape.constant(t); });
  return out;
}

EncoderConfig compressed_config(const EncoderConfig& source, const TowerCompression& spec) {
  EncoderConfig c = source;
  c.width = spec.target_width;
  c.depth = spec.target_depth;
  return c;
}

EncoderParams<ad::Var> build_student_tower(const EncoderConfig& source, const EncoderParams<ad::Var>& teacher,
                                           const TowerMapsT<ad::Var>& maps, const TowerCompression& spec) {
  if (teacher.blocks.size() != spec.source_depth || source.width != spec.source_width)
    throw DimensionError("build_student: teacher " + std::to_string(source.width) + "x" +
                         std::to_string(teacher.blocks.size()) + " does not match compression source " +
                         std::to_string(spec.source_width) + "x" + std::to_string(spec.source_depth));
  check_tower_maps(maps, spec, source.ffn_mult);
  const ad::Var f_emb = maps.emb_out;

  EncoderParams<ad::Var> s;
  s.embed = source.tower == Tower::Image ? ad::matmul(f_emb, teacher.embed) : ad::matmul_nt(teacher.embed, f_emb);
  s.pos = ad::matmul_nt(teacher.pos, f_emb);
  if (source.tower == Tower::Image) s.cls = ad::matmul_nt(teacher.cls, f_emb);
  s.lnf_g = map_vector(f_emb, teacher.lnf_g);
  s.lnf_b = map_vector(f_emb, teacher.lnf_b);
  s.proj = ad::matmul_nt(teacher.proj, f_emb);

  // Width first, per source layer.
  std::vector<BlockParams<ad::Var>> wide(spec.source_depth);
  for (std::size_t l = 0; l < spec.source_depth; ++l) {
    const auto& t = teacher.blocks[l];
    const auto& m = maps.layers[l];
    auto& o = wide[l];
    o.ln1_g = map_vector(f_emb, t.ln1_g);
    o.ln1_b = map_vector(f_emb, t.ln1_b);
    o.wq = kron_map_apply(t.wq, m.qk_out, f_emb);
    o.bq = map_vector(m.qk_out, t.bq);
    o.wk = kron_map_apply(t.wk, m.qk_out, f_emb);
    o.bk = map_vector(m.qk_out, t.bk);
    o.wv = kron_map_apply(t.wv, m.v_out, f_emb);
    o.bv = map_vector(m.v_out, t.bv);
    o.wo = kron_map_apply(t.wo, f_emb, m.v_out);
    o.bo = map_vector(f_emb, t.bo);
    o.ln2_g = map_vector(f_emb, t.ln2_g);
    o.ln2_b = map_vector(f_emb, t.ln2_b);
    o.fc1_w = kron_map_apply(t.fc1_w, m.fc1_out, f_emb);
    o.fc1_b = map_vector(m.fc1_out, t.fc1_b);
    o.fc2_w = kron_map_apply(t.fc2_w, f_emb, m.fc1_out);
    o.fc2_b = map_vector(f_emb, t.fc2_b);
  }

  // Then depth, role by role.
  s.blocks.resize(spec.target_depth);
  BlockParams<ad::Var> probe = wide.front();
  zip_block_params(probe, probe, [&](const char* name, ad::Var&, ad::Var&) {
    std::vector<ad::Var> column;
    column.reserve(wide.size());
    for (auto& b : wide)
      zip_block_params(b, b, [&](const char* n2, ad::Var& v, ad::Var&) {
        if (std::string_view(n2) == name) column.push_back(v);
      });
    std::vector<ad::Var> mixed = depth_combine(column, maps.depth);
    for (std::size_t r = 0; r < mixed.size(); ++r)
      zip_block_params(s.blocks[r], s.blocks[r], [&](const char* n2, ad::Var& slot, ad::Var&) {
        if (std::string_view(n2) == name) slot = mixed[r];
      });
  });
  return s;
}

ClipModel build_student(const ClipModel& teacher, const CompressionMaps& maps, const CompressionSpec& spec) {
  spec.validate(teacher);
  ad::Tape tape;
  ClipModel student;
  for (auto [src, dst, tower_maps, tower_spec] :
       {std::tuple{&teacher.image, &student.image, &maps.image, &spec.image},
        std::tuple{&teacher.text, &student.text, &maps.text, &spec.text}}) {
    auto teacher_vars = bind_constant(tape, *src);
    auto map_vars = bind_constant(tape, *tower_maps);
    auto student_vars = build_student_tower(src->config, teacher_vars, map_vars, *tower_spec);
    dst->config = compressed_config(src->config, *tower_spec);
    dst->params.blocks.resize(dst->config.depth);
    zip_params(dst->config.tower, dst->params, student_vars,
               [](const std::string&, Tensor& out, ad::Var& v) { out = v.value(); });
  }
  student.log_logit_scale = teacher.log_logit_scale;
  student.log_logit_scale.drop_grad();
  return student;
}

VarianceProbe variance_probe(Real sigma_a, Real sigma_b, std::size_t rows, std::size_t cols, std::size_t n_samples,
                             std::uint64_t seed) {
  if (n_samples < kMinProbeSamples)
    throw ContractError("variance_probe: need at least " + std::to_string(kMinProbeSamples) + " samples");
  if (rows == 0 || cols == 0) throw ContractError("variance_probe: empty factor shape");
  VarianceProbe p;
  p.sigma_a = sigma_a;
  p.sigma_b = sigma_b;
  p.rows = rows;
  p.cols = cols;
  p.expected_variance = double(sigma_a) * double(sigma_a) * double(sigma_b) * double(sigma_b);
  Rng rng = Rng::stream(seed, "variance_probe");
  // Welford over every entry of every sampled A ⊗ B.
  double mean = 0, m2 = 0;
  std::size_t n = 0;
  while (n < n_samples) {
    Tensor a({rows, cols}), b({rows, cols});
    rng.fill_normal(a, sigma_a);
    rng.fill_normal(b, sigma_b);
    const Tensor r = kronecker(a, b);
    for (Real x : r.data()) {
      ++n;
      const double d = double(x) - mean;
      mean += d / double(n);
      m2 += d * (double(x) - mean);
    }
    ++p.n_products;
  }
  p.n_samples = n;
  p.mean = mean;
  p.variance = m2 / double(n - 1);
  p.standard_error = std::sqrt(p.variance / double(n));
  return p;
}

std::size_t mapping_param_count(const TowerCompression& t, std::size_t f) {
  const std::size_t square = t.target_width * t.source_width;
  return square + t.source_depth * (2 * square + f * f * square) + t.target_depth * t.source_depth;
}

MappingParamCount mapping_param_count(const CompressionSpec& spec, std::size_t ffn_mult) {
  return {mapping_param_count(spec.image, ffn_mult), mapping_param_count(spec.text, ffn_mult)};
}

std::uint64_t full_map_entries(std::uint64_t source_width, std::uint64_t target_width) {
  return source_width * source_width * target_width * target_width;
}

std::uint64_t factored_pair_entries(std::uint64_t source_width, std::uint64_t target_width) {
  return 2 * source_width * target_width;
}

}  // namespace clipmap
