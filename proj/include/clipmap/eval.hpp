#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "clipmap/data.hpp"
#include "clipmap/mapping.hpp"
#include "clipmap/model.hpp"

namespace clipmap {

// Recall percentages per k. Ties rank the lower column index first.
struct RetrievalReport {
  std::vector<std::size_t> ks;
  std::vector<Real> text_recall;   // TR@k: image query, text candidates
  std::vector<Real> image_recall;  // IR@k: text query, image candidates
  std::size_t n_pairs = 0;

  Real tr(std::size_t k) const;
  Real ir(std::size_t k) const;
};

// Row i of `sim` scores image i against every text; its match is column i.
RetrievalReport recall_at_k(const Tensor& sim, std::vector<std::size_t> ks = {1, 5, 10});

// Embeds every pair of `data` and ranks by cosine similarity.
RetrievalReport evaluate_retrieval(const ClipModel& model, const Dataset& data, std::size_t chunk = 256);

// Classifies each image's attribute by the nearest class prompt; ties pick the
// lower class index. Returns a percentage.
Real zero_shot_accuracy(const ClipModel& model, const SyntheticSpec& spec, std::size_t attribute,
                        const Dataset& data);

struct ParamCount {
  std::size_t image = 0;
  std::size_t text = 0;
  std::size_t total = 0;  // both towers plus the logit scale
};

ParamCount count_params(const ClipModel& model);
ParamCount closed_form_params(const EncoderConfig& image, const EncoderConfig& text);

struct Heatmap {
  std::string name;
  std::uint64_t epoch = 0;
  Tensor values;
};

// One CSV per map tensor, named "<tensor>.<epoch>.csv", headed by
// "# name rows cols epoch" and holding %.17g values.
std::vector<std::filesystem::path> export_heatmap_csv(const CompressionMaps& maps, const std::filesystem::path& dir,
                                                      std::uint64_t epoch);
std::string heatmap_csv(const std::string& name, const Tensor& m, std::uint64_t epoch);
Heatmap read_heatmap_csv(const std::filesystem::path& path);

// Σ |m[i][j]| over i != j.
Real off_diagonal_mass(const Tensor& m);

}  // namespace clipmap
