#include "clipmap/commands.hpp"

#include <algorithm>
#include <cstdio>
#include <ostream>

#include "clipmap/checkpoint.hpp"
#include "clipmap/errors.hpp"
#include "clipmap/eval.hpp"
#include "clipmap/kernels.hpp"
#include "clipmap/rng.hpp"
#include "clipmap/training.hpp"

namespace clipmap {

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names = {"pretrain-teacher", "map",          "retrain",
                                                 "eval",             "inspect-maps", "compare-init"};
  return names;
}

Real dataset_task_loss(const ClipModel& model, const Dataset& data, std::size_t batch) {
  batch = std::min(batch, data.size());
  Real total = 0;
  std::size_t n = 0;
  for (std::size_t start = 0; start + batch <= data.size(); start += batch, ++n) {
    std::vector<std::size_t> idx(batch);
    for (std::size_t i = 0; i < batch; ++i) idx[i] = start + i;
    total += batch_task_loss(model, make_batch(data, idx));
  }
  return total / Real(n);
}

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

struct Context {
  RunConfig cfg;
  std::uint64_t seed = 0;
  std::filesystem::path out;
};

Context prepare(const CommandOptions& opts) {
  Context c;
  c.cfg = opts.config.empty() ? RunConfig() : RunConfig::load(opts.config);
  if (opts.seed) c.cfg.set("train.seed", std::to_string(*opts.seed));
  c.cfg.validate();
  c.seed = c.cfg.seed();
  kernels::set_num_threads(opts.deterministic ? 1 : static_cast<int>(c.cfg.threads()));
  c.out = opts.out;
  std::error_code ec;
  std::filesystem::create_directories(c.out, ec);
  if (ec) throw IoError("cannot create output directory " + c.out.string() + ": " + ec.message());
  return c;
}

const std::filesystem::path& require(const std::filesystem::path& p, const char* flag) {
  if (p.empty()) throw ConfigError(std::string("missing required option ") + flag);
  return p;
}

ClipModel load_model(const std::filesystem::path& p) { return model_from_bundle(load_bundle(p)); }

// The teacher must match the architecture the config describes.
void check_teacher(const ClipModel& teacher, const RunConfig& cfg) {
  for (Tower t : {Tower::Image, Tower::Text}) {
    const EncoderConfig& have = t == Tower::Image ? teacher.image.config : teacher.text.config;
    if (!(have == cfg.encoder(t)))
      throw ConfigError(tower_name(t) + " teacher is " + std::to_string(have.width) + "x" +
                        std::to_string(have.depth) + " but the config describes " +
                        std::to_string(cfg.encoder(t).width) + "x" + std::to_string(cfg.encoder(t).depth));
  }
}

void write_text(const std::filesystem::path& p, const std::string& s) { write_file_atomic(p, s); }

void save_model(const std::filesystem::path& p, const ClipModel& m, const OptimState* optim = nullptr) {
  CheckpointBundle b;
  add_model(b, m);
  if (optim) {
    ClipModel copy = m;
    add_optim(b, *optim, decay_groups(copy.named_params()));
  }
  save_bundle(p, b);
}

void print_report(std::ostream& out, const std::string& label, const RetrievalReport& r) {
  out << label << "  TR@1 " << fmt("%6.2f", r.tr(1)) << "  TR@5 " << fmt("%6.2f", r.tr(5)) << "  TR@10 "
      << fmt("%6.2f", r.tr(10)) << "  IR@1 " << fmt("%6.2f", r.ir(1)) << "  IR@5 " << fmt("%6.2f", r.ir(5))
      << "  IR@10 " << fmt("%6.2f", r.ir(10)) << "  (n=" << r.n_pairs << ")\n";
}

int cmd_pretrain_teacher(const CommandOptions& opts, std::ostream& out) {
  Context c = prepare(opts);
  const Dataset train(c.cfg.data(), Split::Train), val(c.cfg.data(), Split::Val);
  Rng rng = Rng::stream(c.seed, "model");
  ClipModel init = init_clip(c.cfg.encoder(Tower::Image), c.cfg.encoder(Tower::Text), rng);
  TrainResult r = pretrain_teacher(std::move(init), train, c.cfg.stage(Stage::Teacher));
  save_model(c.out / "teacher.ckpt", r.model, &r.optim);
  write_text(c.out / "teacher_loss.csv", r.log.csv());
  if (!r.log.rows.empty())
    out << "task loss " << fmt("%.4f", r.log.rows.front().task_loss) << " -> "
        << fmt("%.4f", r.log.rows.back().task_loss) << " over " << r.log.rows.size() << " steps\n";
  print_report(out, "val", evaluate_retrieval(r.model, val));
  out << "wrote " << (c.out / "teacher.ckpt").string() << "\n";
  return kExitOk;
}

int cmd_map(const CommandOptions& opts, std::ostream& out) {
  Context c = prepare(opts);
  const ClipModel teacher = load_model(require(opts.teacher, "--teacher"));
  check_teacher(teacher, c.cfg);
  const std::uint64_t before = checksum(teacher);
  const CompressionSpec spec = CompressionSpec::uniform(teacher, c.cfg.target_width(), c.cfg.target_depth());
  spec.validate(teacher);
  const std::size_t f = teacher.image.config.ffn_mult;
  Rng rng = Rng::stream(c.seed, "maps");
  CompressionMaps maps = init_maps(spec, f, c.cfg.map_init(), c.cfg.off_diag_std(), rng);

  const Dataset train(c.cfg.data(), Split::Train);
  const StageConfig stage = c.cfg.stage(Stage::Mapping);
  const auto heat = c.out / "heatmaps";
  export_heatmap_csv(maps, heat, 0);
  MappingOptions mo;
  mo.distill = c.cfg.map_distill();
  mo.weights = c.cfg.loss();
  mo.on_step = [&](const CompressionMaps& m, std::uint64_t done) {
    if (done == stage.steps / 2 || done == stage.steps) export_heatmap_csv(m, heat, done);
  };
  MappingResult r = run_mapping_stage(teacher, std::move(maps), spec, train, stage, mo);
  if (checksum(teacher) != before) throw ContractError("teacher weights changed during the mapping stage");

  const ClipModel student = build_student(teacher, r.maps, spec);
  save_model(c.out / "student_init.ckpt", student);
  CheckpointBundle mb;
  add_maps(mb, r.maps, spec, f);
  mb.add("progress.step", Tensor::scalar(Real(r.optim.step)));
  save_bundle(c.out / "maps.ckpt", mb);
  write_text(c.out / "map_loss.csv", r.log.csv());
  const auto pc = mapping_param_count(spec, f);
  out << "mapping parameters: image " << pc.image << " + text " << pc.text << " = " << pc.total() << "\n";
  if (!r.log.rows.empty())
    out << "task loss " << fmt("%.4f", r.log.rows.front().task_loss) << " -> "
        << fmt("%.4f", r.log.rows.back().task_loss) << " over " << r.log.rows.size() << " steps\n";
  out << "wrote " << (c.out / "student_init.ckpt").string() << " and " << (c.out / "maps.ckpt").string() << "\n";
  return kExitOk;
}

int cmd_retrain(const CommandOptions& opts, std::ostream& out) {
  Context c = prepare(opts);
  const ClipModel teacher = load_model(require(opts.teacher, "--teacher"));
  ClipModel student = load_model(require(opts.student, "--student"));
  const std::uint64_t before = checksum(teacher);
  const LossWeights w = c.cfg.loss();
  out << "lambda = " << fmt("%.1f", w.lambda) << (c.cfg.was_set("loss.lambda") ? "" : " (default)") << "\n";
  const Dataset train(c.cfg.data(), Split::Train), val(c.cfg.data(), Split::Val);
  TrainResult r = run_retraining_stage(teacher, std::move(student), train, c.cfg.stage(Stage::Retraining), w);
  if (checksum(teacher) != before) throw ContractError("teacher weights changed during retraining");
  save_model(c.out / "student.ckpt", r.model, &r.optim);
  write_text(c.out / "retrain_loss.csv", r.log.csv());
  print_report(out, "val", evaluate_retrieval(r.model, val));
  out << "wrote " << (c.out / "student.ckpt").string() << "\n";
  return kExitOk;
}

int cmd_eval(const CommandOptions& opts, std::ostream& out) {
  Context c = prepare(opts);
  const auto& path = opts.student.empty() ? require(opts.teacher, "--teacher or --student") : opts.student;
  const ClipModel model = load_model(path);
  const SyntheticSpec ds = c.cfg.data();
  const Dataset val(ds, Split::Val);
  const RetrievalReport r = evaluate_retrieval(model, val);
  const ParamCount pc = count_params(model);
  print_report(out, "val", r);
  std::string csv = "metric,value\n";
  for (std::size_t i = 0; i < r.ks.size(); ++i) {
    csv += "TR@" + std::to_string(r.ks[i]) + "," + fmt("%.17g", r.text_recall[i]) + "\n";
    csv += "IR@" + std::to_string(r.ks[i]) + "," + fmt("%.17g", r.image_recall[i]) + "\n";
  }
  for (std::size_t k = 0; k < ds.attributes; ++k) {
    const Real acc = zero_shot_accuracy(model, ds, k, val);
    out << "zero-shot attribute " << k << ": " << fmt("%.2f", acc) << "%\n";
    csv += "zero_shot_" + std::to_string(k) + "," + fmt("%.17g", acc) + "\n";
  }
  out << "params: image " << pc.image << " + text " << pc.text << " (+1 logit scale) = " << pc.total << "\n";
  csv += "params_image," + std::to_string(pc.image) + "\nparams_text," + std::to_string(pc.text) +
         "\nparams_total," + std::to_string(pc.total) + "\n";
  write_text(c.out / "eval_report.csv", csv);
  return kExitOk;
}

int cmd_inspect_maps(const CommandOptions& opts, std::ostream& out) {
  Context c = prepare(opts);
  const CheckpointBundle b = load_bundle(require(opts.maps, "--maps"));
  const LoadedMaps m = maps_from_bundle(b);
  const std::uint64_t step =
      b.contains("progress.step") ? static_cast<std::uint64_t>(b.get("progress.step").item()) : 0;
  const auto files = export_heatmap_csv(m.maps, c.out / "heatmaps", step);
  for (const auto& [name, t] : m.maps.named_params())
    out << name << " " << shape_str(t->shape()) << " off-diagonal mass " << fmt("%.6g", off_diagonal_mass(*t))
        << "\n";
  out << "wrote " << files.size() << " heatmaps to " << (c.out / "heatmaps").string() << "\n";
  return kExitOk;
}

int cmd_compare_init(const CommandOptions& opts, std::ostream& out) {
  Context c = prepare(opts);
  const ClipModel teacher = load_model(require(opts.teacher, "--teacher"));
  check_teacher(teacher, c.cfg);
  const Dataset train(c.cfg.data(), Split::Train), val(c.cfg.data(), Split::Val);
  const auto rows = compare_map_inits(teacher, c.cfg, c.seed, train, val);
  const std::string csv = init_comparison_csv(rows);
  write_text(c.out / "compare_init.csv", csv);
  out << csv;
  return kExitOk;
}

}  // namespace

std::vector<InitComparisonRow> compare_map_inits(const ClipModel& teacher, const RunConfig& cfg, std::uint64_t seed,
                                                 const Dataset& train, const Dataset& val) {
  const CompressionSpec spec = CompressionSpec::uniform(teacher, cfg.target_width(), cfg.target_depth());
  spec.validate(teacher);
  StageConfig stage = cfg.stage(Stage::Mapping);
  stage.seed = seed;
  const std::size_t f = teacher.image.config.ffn_mult;
  std::vector<InitComparisonRow> rows;
  for (MapInit scheme : {MapInit::Random, MapInit::FanIn, MapInit::FanAvg, MapInit::Diagonal}) {
    Rng rng = Rng::stream(seed, "maps");
    CompressionMaps maps = init_maps(spec, f, scheme, cfg.off_diag_std(), rng);
    MappingResult r = run_mapping_stage(teacher, std::move(maps), spec, train, stage);
    InitComparisonRow row;
    row.scheme = scheme;
    row.steps = stage.steps;
    row.warmup = stage.warmup;
    row.base_lr = stage.lr;
    for (const auto& l : r.log.rows) row.lr_trace.push_back(l.lr);
    if (!r.log.rows.empty()) {
      row.initial_task_loss = r.log.rows.front().task_loss;
      const std::size_t tail = std::min<std::size_t>(20, r.log.rows.size());
      for (std::size_t i = r.log.rows.size() - tail; i < r.log.rows.size(); ++i)
        row.end_task_loss += r.log.rows[i].task_loss;
      row.end_task_loss /= Real(tail);
    }
    const ClipModel student = build_student(teacher, r.maps, spec);
    row.val_task_loss = dataset_task_loss(student, val, stage.batch);
    row.val_tr1 = evaluate_retrieval(student, val).tr(1);
    rows.push_back(std::move(row));
  }
  for (const auto& row : rows)
    if (row.steps != rows.front().steps || row.lr_trace != rows.front().lr_trace)
      throw ContractError("compare-init: runs did not share one schedule");
  return rows;
}

std::string init_comparison_csv(const std::vector<InitComparisonRow>& rows) {
  std::string csv = "method,steps,warmup,lr,initial_task_loss,end_task_loss,val_task_loss,val_tr1\n";
  for (const auto& r : rows)
    csv += map_init_name(r.scheme) + "," + std::to_string(r.steps) + "," + std::to_string(r.warmup) + "," +
           fmt("%.17g", r.base_lr) + "," + fmt("%.17g", r.initial_task_loss) + "," +
           fmt("%.17g", r.end_task_loss) + "," + fmt("%.17g", r.val_task_loss) + "," + fmt("%.17g", r.val_tr1) +
           "\n";
  return csv;
}

int run_command(const std::string& name, const CommandOptions& opts, std::ostream& out, std::ostream& err) {
  try {
    if (name == "pretrain-teacher") return cmd_pretrain_teacher(opts, out);
    if (name == "map") return cmd_map(opts, out);
    if (name == "retrain") return cmd_retrain(opts, out);
    if (name == "eval") return cmd_eval(opts, out);
    if (name == "inspect-maps") return cmd_inspect_maps(opts, out);
    if (name == "compare-init") return cmd_compare_init(opts, out);
    err << "unknown command '" << name << "'\n";
    return kExitConfig;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }
}

}  // namespace clipmap
