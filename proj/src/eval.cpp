#include "clipmap/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "clipmap/checkpoint.hpp"
#include "clipmap/errors.hpp"

namespace clipmap {

namespace {

std::size_t position_of(const std::vector<std::size_t>& ks, std::size_t k) {
  auto it = std::find(ks.begin(), ks.end(), k);
  if (it == ks.end()) throw ContractError("recall for k=" + std::to_string(k) + " was not computed");
  return static_cast<std::size_t>(it - ks.begin());
}

// Rank of column `target` in `row`: strictly larger entries plus equal
// entries at lower indices.
std::size_t rank_in_row(const Real* row, std::size_t n, std::size_t target) {
  const Real v = row[target];
  std::size_t rank = 0;
  for (std::size_t j = 0; j < n; ++j)
    if (row[j] > v || (row[j] == v && j < target)) ++rank;
  return rank;
}

}  // namespace

Real RetrievalReport::tr(std::size_t k) const { return text_recall[position_of(ks, k)]; }
Real RetrievalReport::ir(std::size_t k) const { return image_recall[position_of(ks, k)]; }

RetrievalReport recall_at_k(const Tensor& sim, std::vector<std::size_t> ks) {
  if (sim.rank() != 2 || sim.rows() != sim.cols())
    throw ContractError("recall_at_k: similarity must be square, got " + shape_str(sim.shape()));
  const std::size_t n = sim.rows();
  const Tensor simt = sim.transposed();
  RetrievalReport r;
  r.n_pairs = n;
  r.ks = std::move(ks);
  std::vector<std::size_t> tr_rank(n), ir_rank(n);
  for (std::size_t i = 0; i < n; ++i) {
    tr_rank[i] = rank_in_row(sim.data().data() + i * n, n, i);
    ir_rank[i] = rank_in_row(simt.data().data() + i * n, n, i);
  }
  for (std::size_t k : r.ks) {
    const auto hits = [&](const std::vector<std::size_t>& ranks) {
      return Real(100) * Real(std::count_if(ranks.begin(), ranks.end(), [&](std::size_t x) { return x < k; })) /
             Real(n);
    };
    r.text_recall.push_back(hits(tr_rank));
    r.image_recall.push_back(hits(ir_rank));
  }
  return r;
}

namespace {

void embed_all(const ClipModel& model, const Dataset& data, std::size_t chunk, Tensor& img, Tensor& txt) {
  const std::size_t n = data.size(), e = model.image.config.embed_dim;
  img = Tensor({n, e});
  txt = Tensor({n, e});
  for (std::size_t start = 0; start < n; start += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(n, start + chunk); ++i) idx.push_back(i);
    const Batch b = make_batch(data, idx);
    const Tensor ie = encode_image(model, b.images);
    const Tensor te = encode_text(model, b.tokens);
    std::copy(ie.data().begin(), ie.data().end(), img.data().begin() + start * e);
    std::copy(te.data().begin(), te.data().end(), txt.data().begin() + start * e);
  }
}

}  // namespace

RetrievalReport evaluate_retrieval(const ClipModel& model, const Dataset& data, std::size_t chunk) {
  Tensor img, txt;
  embed_all(model, data, std::max<std::size_t>(chunk, 1), img, txt);
  return recall_at_k(ad::matmul(img, txt.transposed()));
}

Real zero_shot_accuracy(const ClipModel& model, const SyntheticSpec& spec, std::size_t attribute,
                        const Dataset& data) {
  if (attribute >= spec.attributes) throw InputError("zero_shot_accuracy: attribute out of range");
  TokenBatch prompts;
  prompts.batch = spec.values;
  prompts.length = spec.max_len;
  for (std::size_t v = 0; v < spec.values; ++v) {
    auto ids = prompt_for_class(spec, attribute, v);
    prompts.ids.insert(prompts.ids.end(), ids.begin(), ids.end());
  }
  const Tensor classes = encode_text(model, prompts);
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += 256) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + 256); ++i) idx.push_back(i);
    const Batch b = make_batch(data, idx);
    const Tensor sim = ad::matmul(encode_image(model, b.images), classes.transposed());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < spec.values; ++c)
        if (sim.at(r, c) > sim.at(r, best)) best = c;
      if (best == data[idx[r]].latent[attribute]) ++correct;
    }
  }
  return Real(100) * Real(correct) / Real(data.size());
}

ParamCount count_params(const ClipModel& model) {
  ParamCount c;
  c.image = model.image.param_count();
  c.text = model.text.param_count();
  c.total = c.image + c.text + model.log_logit_scale.numel();
  return c;
}

ParamCount closed_form_params(const EncoderConfig& image, const EncoderConfig& text) {
  ParamCount c;
  c.image = closed_form_param_count(image);
  c.text = closed_form_param_count(text);
  c.total = c.image + c.text + 1;
  return c;
}

std::string heatmap_csv(const std::string& name, const Tensor& m, std::uint64_t epoch) {
  std::string out = "# " + name + " " + std::to_string(m.rows()) + " " + std::to_string(m.cols()) + " " +
                    std::to_string(epoch) + "\n";
  char buf[32];
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", double(m.at(r, c)));
      if (c) out += ',';
      out += buf;
    }
    out += '\n';
  }
  return out;
}

std::vector<std::filesystem::path> export_heatmap_csv(const CompressionMaps& maps, const std::filesystem::path& dir,
                                                      std::uint64_t epoch) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::vector<std::filesystem::path> written;
  for (const auto& [name, t] : maps.named_params()) {
    if (!t->all_finite()) throw NumericError("export_heatmap_csv: " + name + " has non-finite entries");
    const auto path = dir / (name + "." + std::to_string(epoch) + ".csv");
    write_file_atomic(path, heatmap_csv(name, *t, epoch));
    written.push_back(path);
  }
  return written;
}

Heatmap read_heatmap_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  std::istringstream head(line);
  std::string hash;
  Heatmap h;
  std::size_t rows = 0, cols = 0;
  if (!(head >> hash >> h.name >> rows >> cols >> h.epoch) || hash != "#" || rows == 0 || cols == 0)
    throw InputError(path.string() + ": malformed heatmap header");
  h.values = Tensor({rows, cols});
  for (std::size_t r = 0; r < rows; ++r) {
    if (!std::getline(in, line)) throw InputError(path.string() + ": missing row " + std::to_string(r));
    const char* p = line.c_str();
    for (std::size_t c = 0; c < cols; ++c) {
      char* end = nullptr;
      h.values.at(r, c) = Real(std::strtod(p, &end));
      if (end == p) throw InputError(path.string() + ": bad value at row " + std::to_string(r));
      p = *end == ',' ? end + 1 : end;
    }
  }
  return h;
}

Real off_diagonal_mass(const Tensor& m) {
  Real s = 0;
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c)
      if (r != c) s += std::abs(m.at(r, c));
  return s;
}

}  // namespace clipmap
