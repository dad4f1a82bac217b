#pragma once

// Width/depth compression of a trained encoder through learnable linear maps.
//
// Width: every weight block W [out × in] becomes F_out · W · F_inᵀ, which is
// the vectorized map (F_in ⊗ F_out)·vec(W) without materializing the
// Kronecker product. Maps are shared across a layer's components:
//
//   W'q  = F_qk  · Wq  · F_embᵀ      W'k = F_qk · Wk · F_embᵀ
//   W'v  = F_v   · Wv  · F_embᵀ      W'o = F_emb · Wo · F_vᵀ
//   W'fc1 = F_fc1 · Wfc1 · F_embᵀ    W'fc2 = F_emb · Wfc2 · F_fc1ᵀ
//
// Vectors (biases, layer-norm affines) map through the output-side factor
// alone; embeddings, positions, and the class token through F_emb; the output
// projection only on its input side so the embedding width stays fixed.
//
// Depth: after width mapping, new layer l' is Σ_l L[l', l] · layer_l for every
// block tensor, with one L per tower.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "clipmap/autodiff.hpp"
#include "clipmap/model.hpp"
#include "clipmap/tensor.hpp"

namespace clipmap {

class Rng;

struct TowerCompression {
  std::size_t source_width = 0;
  std::size_t target_width = 0;
  std::size_t source_depth = 0;
  std::size_t target_depth = 0;
};

struct CompressionSpec {
  TowerCompression image;
  TowerCompression text;

  // Spec reducing both towers of `model` to (width, depth).
  static CompressionSpec uniform(const ClipModel& model, std::size_t width, std::size_t depth);
  // Throws ConfigError on growth, zero sizes, or width % heads != 0, and
  // DimensionError when the source sizes disagree with `model`.
  void validate(const ClipModel& model) const;
};

template <class T>
struct LayerWidthMaps {
  T qk_out;   // [D₂ × D₁], tied for queries and keys
  T v_out;    // [D₂ × D₁], also the input map of the attention output
  T fc1_out;  // [f·D₂ × f·D₁], also the input map of fc2
};

template <class T>
struct TowerMapsT {
  T emb_out;  // [D₂ × D₁]
  std::vector<LayerWidthMaps<T>> layers;  // one per source layer
  T depth;  // [L₂ × L₁]
};

template <class A, class B, class Fn>
void zip_tower_maps(A& a, B& b, Fn&& fn) {
  fn(std::string("emb_out"), a.emb_out, b.emb_out);
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    const std::string prefix = "layers." + std::to_string(l) + ".";
    fn(prefix + "qk_out", a.layers[l].qk_out, b.layers[l].qk_out);
    fn(prefix + "v_out", a.layers[l].v_out, b.layers[l].v_out);
    fn(prefix + "fc1_out", a.layers[l].fc1_out, b.layers[l].fc1_out);
  }
  fn(std::string("depth"), a.depth, b.depth);
}

using TowerMaps = TowerMapsT<Tensor>;

struct CompressionMaps {
  TowerMaps image;
  TowerMaps text;

  // Tower-qualified names: "image.emb_out", "text.layers.2.v_out", ...
  std::vector<std::pair<std::string, Tensor*>> named_params();
  std::vector<std::pair<std::string, const Tensor*>> named_params() const;
  void set_requires_grad(bool on);
  std::size_t param_count() const;
};

enum class MapInit {
  Diagonal,  // rectangular identity, optional small off-diagonal noise
  Random,    // N(0, 0.02²)
  FanIn,     // N(0, 2/fan_in)
  FanAvg,    // N(0, 2/(fan_in + fan_out))
};

std::string map_init_name(MapInit m);
MapInit parse_map_init(const std::string& name);

// F_out · W · F_inᵀ.
Tensor kron_map_apply(const Tensor& w, const Tensor& f_out, const Tensor& f_in);
ad::Var kron_map_apply(ad::Var w, ad::Var f_out, ad::Var f_in);

// A ⊗ B, materialized.
Tensor kronecker(const Tensor& a, const Tensor& b);

// Reference route: builds F_in ⊗ F_out explicitly, applies it to the
// column-stacked vec(W), and folds the result back. Refuses any factor
// dimension above kMaxOracleDim.
inline constexpr std::size_t kMaxOracleDim = 16;
Tensor explicit_kron_oracle(const Tensor& f_in, const Tensor& f_out, const Tensor& w);

// Rows ≤ cols. Ones on the diagonal, N(0, off_diag_std²) elsewhere (exact
// zeros when the std is 0).
Tensor diag_inherit_init(std::size_t rows, std::size_t cols, Real off_diag_std, Rng& rng);
Tensor diag_inherit_init(std::size_t rows, std::size_t cols);

// Row r selects source layer round((r+1)·L₁/L₂) − 1.
Tensor depth_selector_init(std::size_t target_depth, std::size_t source_depth);

std::vector<Tensor> depth_combine(const std::vector<Tensor>& blocks, const Tensor& depth_map);
std::vector<ad::Var> depth_combine(const std::vector<ad::Var>& blocks, ad::Var depth_map);

// Diagonal initialization applies diag_inherit_init to every width map and
// depth_selector_init to the depth map. The other schemes draw every mapping
// tensor, depth map included, from their Gaussian.
CompressionMaps init_maps(const CompressionSpec& spec, std::size_t ffn_mult, MapInit scheme, Real off_diag_std,
                          Rng& rng);

// Differentiable student construction for one tower.
EncoderParams<ad::Var> build_student_tower(const EncoderConfig& source, const EncoderParams<ad::Var>& teacher,
                                           const TowerMapsT<ad::Var>& maps, const TowerCompression& spec);
TowerMapsT<ad::Var> bind(ad::Tape& tape, TowerMaps& maps);
TowerMapsT<ad::Var> bind_constant(ad::Tape& tape, const TowerMaps& maps);

EncoderConfig compressed_config(const EncoderConfig& source, const TowerCompression& spec);

// Materializes the compressed model. The teacher is read only; the logit
// scale is copied.
ClipModel build_student(const ClipModel& teacher, const CompressionMaps& maps, const CompressionSpec& spec);

struct VarianceProbe {
  Real sigma_a = 0;
  Real sigma_b = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t n_samples = 0;  // Kronecker entries observed
  std::size_t n_products = 0;  // independent (A, B) draws
  double mean = 0;
  double variance = 0;
  double expected_variance = 0;  // σ_A²·σ_B²
  double standard_error = 0;     // of the mean, sqrt(variance / n)
};

inline constexpr std::size_t kMinProbeSamples = 100000;

// Draws independent A, B ∈ R^{rows×cols} with i.i.d. N(0, σ²) entries until at
// least n_samples entries of A ⊗ B have been observed.
VarianceProbe variance_probe(Real sigma_a, Real sigma_b, std::size_t rows, std::size_t cols, std::size_t n_samples,
                             std::uint64_t seed);

struct MappingParamCount {
  std::size_t image = 0;
  std::size_t text = 0;
  std::size_t total() const { return image + text; }
};

MappingParamCount mapping_param_count(const CompressionSpec& spec, std::size_t ffn_mult);
std::size_t mapping_param_count(const TowerCompression& tower, std::size_t ffn_mult);

// Entries of one unfactored D₂²×D₁² map versus one factored (F_in, F_out) pair.
std::uint64_t full_map_entries(std::uint64_t source_width, std::uint64_t target_width);
std::uint64_t factored_pair_entries(std::uint64_t source_width, std::uint64_t target_width);

}  // namespace clipmap
