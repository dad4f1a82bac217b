// Acceptance checks, one PASS/FAIL line per criterion.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "clipmap/checkpoint.hpp"
#include "clipmap/commands.hpp"
#include "clipmap/config.hpp"
#include "clipmap/data.hpp"
#include "clipmap/errors.hpp"
#include "clipmap/eval.hpp"
#include "clipmap/kernels.hpp"
#include "clipmap/losses.hpp"
#include "clipmap/mapping.hpp"
#include "clipmap/rng.hpp"
#include "clipmap/training.hpp"

using namespace clipmap;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Tensor gaussian(Shape shape, Rng& rng, Real std = 1) {
  Tensor t(std::move(shape));
  rng.fill_normal(t, std);
  return t;
}

fs::path g_teacher_path;
fs::path g_work;

const ClipModel& fixture_teacher() {
  static const ClipModel t = [] {
    if (g_teacher_path.empty()) throw ConfigError("this criterion needs --teacher");
    return model_from_bundle(load_bundle(g_teacher_path));
  }();
  return t;
}

Tensor leading(const Tensor& t, const Shape& shape) {
  if (shape.empty()) return t;
  Tensor out(shape);
  if (shape.size() == 1) {
    std::copy_n(t.data().begin(), shape[0], out.data().begin());
    return out;
  }
  for (std::size_t r = 0; r < shape[0]; ++r)
    for (std::size_t c = 0; c < shape[1]; ++c) out.at(r, c) = t.at(r, c);
  return out;
}

Batch val_probe(const SyntheticSpec& spec, std::size_t n) {
  std::vector<Pair> pairs;
  for (std::size_t i = 0; i < n; ++i) pairs.push_back(generate_pair(spec, Split::Val, i));
  return make_batch(pairs);
}

// 1
Outcome kronecker_identity() {
  Rng rng(derive_seed(1, "acceptance.kron"));
  Real worst = 0;
  const std::size_t n = 1000;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t out1 = 1 + rng.below(8), in1 = 1 + rng.below(8);
    const std::size_t out2 = 1 + rng.below(4), in2 = 1 + rng.below(4);
    const Tensor w = gaussian({out1, in1}, rng), fo = gaussian({out2, out1}, rng), fi = gaussian({in2, in1}, rng);
    worst = std::max(worst, max_abs_diff(kron_map_apply(w, fo, fi), explicit_kron_oracle(fi, fo, w)));
  }
  return {worst <= 1e-10, std::to_string(n) + " instances, max |diff| " + fmt("%.3g", worst) + " (<= 1e-10)"};
}

// 2
Outcome weight_inheritance() {
  const ClipModel& t = fixture_teacher();
  const std::size_t d1 = t.image.config.width, l1 = t.image.config.depth;
  std::size_t mismatched = 0, compared = 0;
  std::string first_bad;
  for (std::size_t d2 : {d1, d1 / 2, d1 / 4}) {
    const auto spec = CompressionSpec::uniform(t, d2, l1);
    Rng rng(2);
    const ClipModel s = build_student(t, init_maps(spec, t.image.config.ffn_mult, MapInit::Diagonal, 0, rng), spec);
    const auto tp = t.named_params();
    const auto sp = s.named_params();
    for (std::size_t i = 0; i < tp.size(); ++i) {
      const std::string& name = tp[i].first;
      const Tensor& src = *tp[i].second;
      const bool input_side_only = name == "text.embed" || name.ends_with("pos") || name.ends_with("proj");
      const Tensor expect = input_side_only ? leading(src, {src.rows(), d2}) : leading(src, sp[i].second->shape());
      ++compared;
      if (!same_values(expect, *sp[i].second)) {
        ++mismatched;
        if (first_bad.empty()) first_bad = name + " at D2=" + std::to_string(d2);
      }
    }
  }
  const auto spec = CompressionSpec::uniform(t, d1, l1);
  Rng rng(3);
  const ClipModel same = build_student(t, init_maps(spec, t.image.config.ffn_mult, MapInit::Diagonal, 0, rng), spec);
  SyntheticSpec data;
  const Batch b = val_probe(data, 32);
  const Real diff = std::max(max_abs_diff(encode_image(same, b.images), encode_image(t, b.images)),
                             max_abs_diff(encode_text(same, b.tokens), encode_text(t, b.tokens)));
  std::string detail = std::to_string(compared - mismatched) + "/" + std::to_string(compared) +
                       " tensors bit-exact over D2 in {" + std::to_string(d1) + "," + std::to_string(d1 / 2) + "," +
                       std::to_string(d1 / 4) + "}; identity-spec forward max |diff| " + fmt("%.3g", diff) +
                       " (<= 1e-9)";
  if (!first_bad.empty()) detail += "; first mismatch " + first_bad;
  return {mismatched == 0 && diff <= 1e-9, detail};
}

// 3
Outcome variance_law() {
  bool pass = true;
  std::string detail;
  std::uint64_t seed = 30;
  for (auto [a, b] : {std::pair<Real, Real>{0.1, 0.1}, {1, 1}, {0.5, 0.2}}) {
    const VarianceProbe p = variance_probe(a, b, 4, 8, 1000000, seed++);
    const double rel = std::abs(p.variance - p.expected_variance) / p.expected_variance;
    const double z = std::abs(p.mean) / p.standard_error;
    pass = pass && rel <= 0.03 && z <= 3 && p.n_samples >= 1000000;
    detail += "(" + fmt("%g", a) + "," + fmt("%g", b) + "): var " + fmt("%.4g", p.variance) + " vs " +
              fmt("%.4g", p.expected_variance) + " (" + fmt("%.2f", 100 * rel) + "%), mean " + fmt("%.2f", z) +
              " SE; ";
  }
  detail += "n >= 1e6 each";
  return {pass, detail};
}

// 4
Outcome gradient_check() {
  EncoderConfig ic, tc;
  ic.tower = Tower::Image;
  tc.tower = Tower::Text;
  for (EncoderConfig* c : {&ic, &tc}) c->width = 16, c->depth = 2;
  SyntheticSpec data;
  data.n_train = 512;
  const Dataset train(data, Split::Train);
  Rng rng(derive_seed(4, "acceptance.teacher"));
  StageConfig warm;
  warm.stage = Stage::Teacher;
  warm.steps = 30;
  warm.warmup = 3;
  warm.batch = 32;
  warm.lr = Real(2e-3);
  const ClipModel teacher = pretrain_teacher(init_clip(ic, tc, rng), train, warm).model;

  const auto spec = CompressionSpec::uniform(teacher, 8, 1);
  Rng map_rng(derive_seed(4, "acceptance.maps"));
  CompressionMaps maps = init_maps(spec, ic.ffn_mult, MapInit::Diagonal, Real(0.05), map_rng);
  std::vector<std::size_t> idx(16);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const Batch batch = make_batch(train, idx);

  auto loss_value = [&](ad::Tape& tape, bool leaves) {
    auto mi = leaves ? bind(tape, maps.image) : bind_constant(tape, maps.image);
    auto mt = leaves ? bind(tape, maps.text) : bind_constant(tape, maps.text);
    const GraphLogits l = mapped_student_logits(tape, teacher, mi, mt, spec, batch);
    return clip_task_loss(l.image_to_text, l.text_to_image);
  };
  maps.set_requires_grad(true);
  {
    ad::Tape tape;
    tape.backward(loss_value(tape, true));
  }
  const Real h = Real(1e-3);
  Real worst = 0;
  std::size_t checked = 0;
  std::string worst_name;
  Rng pick(derive_seed(4, "acceptance.entries"));
  for (auto& [name, t] : maps.named_params()) {
    for (int k = 0; k < 5; ++k) {
      const std::size_t i = pick.below(t->numel());
      const Real saved = (*t)[i];
      (*t)[i] = saved + h;
      ad::Tape up;
      const Real fp = loss_value(up, false).value().item();
      (*t)[i] = saved - h;
      ad::Tape down;
      const Real fm = loss_value(down, false).value().item();
      (*t)[i] = saved;
      const Real numeric = (fp - fm) / (2 * h), analytic = t->grad()[i];
      const Real rel = std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), Real(1e-8)});
      if (rel > worst) worst = rel, worst_name = name;
      ++checked;
    }
  }
  return {worst <= 1e-3, std::to_string(checked) + " entries over F and L_depth, h=1e-3, max rel err " +
                             fmt("%.3g", worst) + " (<= 1e-3) at " + worst_name};
}

// 5
Outcome loss_identities() {
  Rng rng(derive_seed(5, "acceptance.loss"));
  bool endpoints = true;
  for (int i = 0; i < 100; ++i) {
    const Real task = rng.normal(0, 3), soft = rng.normal(0, 3);
    endpoints = endpoints && total_loss(task, soft, LossWeights{0}) == task &&
                total_loss(task, soft, LossWeights{1}) == soft;
  }
  Real worst_entropy = 0, worst_uniform = 0;
  for (std::size_t b : {2, 8, 64}) {
    const Tensor s = gaussian({b, b}, rng, 5);
    const LogitPair p{s, s.transposed()};
    const Real expect =
        mean_row_entropy(ad::softmax_rows(s)) + mean_row_entropy(ad::softmax_rows(s.transposed()));
    worst_entropy = std::max(worst_entropy, std::abs(distill_loss(p, p) - expect));
    const Tensor u({b, b}, rng.normal());
    worst_uniform = std::max(worst_uniform, std::abs(clip_task_loss(u, u.transposed()) - 2 * std::log(Real(b))));
  }
  return {endpoints && worst_entropy <= 1e-9 && worst_uniform <= 1e-9,
          std::string("lambda endpoints ") + (endpoints ? "bit-exact" : "NOT exact") + "; self-distill vs entropy " +
              fmt("%.3g", worst_entropy) + "; uniform vs 2 ln B " + fmt("%.3g", worst_uniform) + " (<= 1e-9)"};
}

// 6
Outcome init_ordering() {
  const ClipModel& t = fixture_teacher();
  const RunConfig cfg;
  const Dataset train(cfg.data(), Split::Train), val(cfg.data(), Split::Val);
  bool pass = true;
  std::string detail;
  for (std::uint64_t seed : {0, 1, 2}) {
    const auto rows = compare_map_inits(t, cfg, seed, train, val);
    const Real diag = rows.back().end_task_loss;
    detail += "seed " + std::to_string(seed) + ":";
    for (const auto& r : rows) {
      detail += " " + map_init_name(r.scheme) + "=" + fmt("%.4f", r.end_task_loss);
      if (r.scheme != MapInit::Diagonal && !(diag < r.end_task_loss)) pass = false;
    }
    detail += "; ";
  }
  return {pass, detail + "diag strictly lowest required"};
}

// 7
Outcome convergence_ordering() {
  const ClipModel& t = fixture_teacher();
  const RunConfig cfg;
  const Dataset train(cfg.data(), Split::Train), val(cfg.data(), Split::Val);
  const auto spec = CompressionSpec::uniform(t, cfg.target_width(), cfg.target_depth());
  StageConfig retrain = cfg.stage(Stage::Retraining);
  retrain.steps = 2000;
  const LossWeights weights{1};
  bool pass = true;
  std::string detail;
  for (std::uint64_t seed : {0, 1, 2}) {
    StageConfig map_stage = cfg.stage(Stage::Mapping);
    map_stage.seed = seed;
    retrain.seed = seed;
    Rng map_rng = Rng::stream(seed, "maps");
    const auto mapped = run_mapping_stage(t, init_maps(spec, t.image.config.ffn_mult, MapInit::Diagonal, 0, map_rng),
                                          spec, train, map_stage);
    const ClipModel a = run_retraining_stage(t, build_student(t, mapped.maps, spec), train, retrain, weights).model;
    Rng init_rng = Rng::stream(seed, "student");
    ClipModel random = init_clip(compressed_config(t.image.config, spec.image),
                                 compressed_config(t.text.config, spec.text), init_rng);
    const ClipModel b = run_retraining_stage(t, std::move(random), train, retrain, weights).model;
    const Real tr_mapped = evaluate_retrieval(a, val).tr(1), tr_random = evaluate_retrieval(b, val).tr(1);
    pass = pass && tr_mapped >= tr_random;
    detail += "seed " + std::to_string(seed) + ": mapped " + fmt("%.2f", tr_mapped) + " vs random " +
              fmt("%.2f", tr_random) + "; ";
  }
  return {pass, detail + "TR@1 on " + std::to_string(val.size()) + " val pairs, 2000 retrain steps, lambda=1"};
}

// 8
Outcome contracts() {
  const ClipModel& t = fixture_teacher();
  const std::uint64_t before = checksum(t);
  RunConfig cfg;
  const Dataset train(cfg.data(), Split::Train);
  const auto spec = CompressionSpec::uniform(t, cfg.target_width(), cfg.target_depth());
  StageConfig map_stage = cfg.stage(Stage::Mapping), retrain = cfg.stage(Stage::Retraining);
  map_stage.steps = retrain.steps = 20;
  map_stage.warmup = retrain.warmup = 2;
  Rng rng(8);
  MappingOptions opts;
  opts.distill = true;
  const auto mapped =
      run_mapping_stage(t, init_maps(spec, t.image.config.ffn_mult, MapInit::Diagonal, 0, rng), spec, train, map_stage, opts);
  const bool after_map = checksum(t) == before;
  run_retraining_stage(t, build_student(t, mapped.maps, spec), train, retrain, LossWeights{0.5});
  const bool after_retrain = checksum(t) == before;

  // Two identical deterministic command runs.
  const fs::path root = g_work / "c8";
  fs::remove_all(root);
  fs::create_directories(root);
  const fs::path conf = root / "run.conf";
  {
    std::ofstream f(conf);
    f << "train.map.steps = 10\ntrain.map.warmup = 2\ntrain.retrain.steps = 10\ntrain.retrain.warmup = 2\n"
         "loss.lambda = 0.5\n";
  }
  std::ostringstream sink;
  bool ran = true;
  for (const char* sub : {"a", "b"}) {
    CommandOptions o;
    o.config = conf;
    o.teacher = g_teacher_path;
    o.out = root / sub;
    o.deterministic = true;
    o.seed = 5;
    ran = ran && run_command("map", o, sink, sink) == kExitOk;
    o.student = o.out / "student_init.ckpt";
    ran = ran && run_command("retrain", o, sink, sink) == kExitOk;
  }
  bool identical = ran;
  std::string files;
  for (const char* f : {"maps.ckpt", "student_init.ckpt", "student.ckpt", "map_loss.csv", "retrain_loss.csv"}) {
    const bool same = ran && read_file(root / "a" / f) == read_file(root / "b" / f);
    identical = identical && same;
    files += std::string(" ") + f + (same ? "=" : "!=");
  }
  const bool teacher_file = checksum(model_from_bundle(load_bundle(g_teacher_path))) == before;
  fs::remove_all(root);
  return {after_map && after_retrain && identical && teacher_file,
          std::string("teacher checksum ") + (after_map && after_retrain && teacher_file ? "unchanged" : "CHANGED") +
              " through both stages; repeated deterministic runs:" + files};
}

// 9
Outcome parameter_accounting() {
  const ClipModel& t = fixture_teacher();
  bool pass = true;
  std::size_t cases = 0;
  for (std::size_t d2 : {64, 32, 16, 8})
    for (std::size_t l2 : {8, 4, 1}) {
      const auto spec = CompressionSpec::uniform(t, d2, l2);
      Rng rng(9);
      const auto maps = init_maps(spec, t.image.config.ffn_mult, MapInit::FanIn, 0, rng);
      std::size_t enumerated = 0;
      for (const auto& [name, tensor] : maps.named_params()) enumerated += tensor->numel();
      pass = pass && mapping_param_count(spec, t.image.config.ffn_mult).total() == enumerated;
      ++cases;
    }
  const std::uint64_t factored = factored_pair_entries(768, 256), full = full_map_entries(768, 256);
  pass = pass && factored == 393216 && full == 38654705664ull;
  return {pass, std::to_string(cases) + " specs match enumeration; D1=768/D2=256: factored " + std::to_string(factored) +
                    " vs full " + std::to_string(full)};
}

// 10
Outcome checkpoint_robustness() {
  Rng rng(derive_seed(10, "acceptance.ckpt"));
  std::size_t exact = 0, corruptions = 0, detected = 0;
  for (int i = 0; i < 100; ++i) {
    CheckpointBundle b;
    const std::size_t n = 1 + rng.below(5);
    for (std::size_t k = 0; k < n; ++k) {
      Shape shape;
      for (std::size_t r = 0, rank = rng.below(4); r < rank; ++r) shape.push_back(1 + rng.below(6));
      b.add("tensor." + std::to_string(k), gaussian(shape, rng, 10));
    }
    const auto bytes = encode_bundle(b);
    const CheckpointBundle d = decode_bundle(bytes);
    bool same = d.tensors.size() == b.tensors.size();
    for (std::size_t k = 0; same && k < n; ++k)
      same = d.tensors[k].first == b.tensors[k].first && same_values(d.tensors[k].second, b.tensors[k].second) &&
             encode_bundle(d) == bytes;
    exact += same;
    for (std::size_t pos = 0; pos < bytes.size(); ++pos) {
      auto bad = bytes;
      bad[pos] ^= static_cast<std::uint8_t>(1 + rng.below(255));
      ++corruptions;
      try {
        decode_bundle(bad);
      } catch (const IoError&) {
        ++detected;
      }
    }
  }
  return {exact == 100 && detected == corruptions, std::to_string(exact) + "/100 bundles round-trip bit-exactly; " +
                                                       std::to_string(detected) + "/" + std::to_string(corruptions) +
                                                       " single-byte corruptions detected"};
}

struct Criterion {
  const char* title;
  double budget_s;  // 0: no stated limit
  std::function<Outcome()> run;
};

const std::vector<Criterion>& criteria() {
  static const std::vector<Criterion> c = {
      {"Kronecker identity", 5, kronecker_identity},
      {"weight inheritance", 0, weight_inheritance},
      {"variance law", 30, variance_law},
      {"gradient correctness", 60, gradient_check},
      {"loss identities", 0, loss_identities},
      {"init-method ordering", 15 * 60, init_ordering},
      {"convergence ordering", 20 * 60, convergence_ordering},
      {"frozen teacher and determinism", 0, contracts},
      {"parameter accounting", 0, parameter_accounting},
      {"checkpoint robustness", 0, checkpoint_robustness},
  };
  return c;
}

bool run_one(std::size_t n) {
  const Criterion& c = criteria()[n - 1];
  const auto start = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = c.run();
  } catch (const std::exception& e) {
    o = {false, std::string("error: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::string timing = fmt("%.1f s", secs);
  if (c.budget_s > 0) {
    timing += fmt(" of %.0f s", c.budget_s);
    if (secs > c.budget_s) o.pass = false;
  }
  std::cout << "criterion " << n << " " << (o.pass ? "PASS" : "FAIL") << "  " << c.title << ": " << o.detail << " ["
            << timing << "]" << std::endl;
  return o.pass;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::vector<std::size_t> which;
  app.add_option("--criterion", which, "criterion numbers to run (default: all)")->check(CLI::Range(1, 10));
  app.add_option("--teacher", g_teacher_path, "fixture teacher checkpoint (criteria 2, 6, 7, 8, 9)");
  std::string work = (fs::temp_directory_path() / "clipmap_acceptance").string();
  app.add_option("--work", work, "scratch directory");
  CLI11_PARSE(app, argc, argv);
  g_work = work;
  kernels::set_num_threads(1);
  kernels::keep_freed_buffers();
  if (which.empty())
    for (std::size_t i = 1; i <= criteria().size(); ++i) which.push_back(i);
  bool all = true;
  for (std::size_t n : which) all = run_one(n) && all;
  return all ? 0 : 1;
}
