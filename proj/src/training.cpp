#include "clipmap/training.hpp"

#include <cmath>
#include <cstdio>
#include <memory>
#include <unordered_map>

#include "clipmap/errors.hpp"

namespace clipmap {

std::string stage_name(Stage s) {
  switch (s) {
    case Stage::Teacher: return "teacher";
    case Stage::Mapping: return "map";
    case Stage::Retraining: return "retrain";
  }
  return "?";
}

void StageConfig::validate() const {
  const std::string who = "train." + stage_name(stage) + ": ";
  if (steps > 0 && warmup >= steps)
    throw ConfigError(who + "warmup " + std::to_string(warmup) + " must be below steps " + std::to_string(steps));
  if (!(clip > 0)) throw ConfigError(who + "clip norm must be positive");
  if (!(lr >= 0)) throw ConfigError(who + "learning rate must be >= 0");
  if (batch == 0) throw ConfigError(who + "batch must be >= 1");
  if (!(adamw.beta1 >= 0 && adamw.beta1 < 1 && adamw.beta2 >= 0 && adamw.beta2 < 1))
    throw ConfigError(who + "betas must lie in [0, 1)");
  if (!(adamw.eps > 0)) throw ConfigError(who + "eps must be positive");
  if (!(adamw.weight_decay >= 0)) throw ConfigError(who + "weight decay must be >= 0");
}

std::string LossLog::csv() const {
  std::string out = std::string(kHeader) + "\n";
  char line[256];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%llu,%s,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                  static_cast<unsigned long long>(r.step), stage_name(r.stage).c_str(), double(r.lr),
                  double(r.task_loss), double(r.soft_loss), double(r.total_loss), double(r.grad_norm));
    out += line;
  }
  return out;
}

namespace {

struct StepLosses {
  ad::Var task;
  ad::Var soft;  // invalid when the stage has no soft term
  ad::Var total;
};

void require_finite(const std::vector<ParamRef>& params, std::uint64_t step, bool grads) {
  for (const auto& p : params) {
    auto span = grads ? std::span<const Real>(p.tensor->grad()) : std::span<const Real>(p.tensor->data());
    for (Real v : span)
      if (!std::isfinite(v))
        throw NumericError("step " + std::to_string(step) + ": non-finite " + (grads ? "gradient" : "value") +
                           " in " + p.name);
  }
}

template <class BuildLoss, class AfterStep>
void optimize(const StageConfig& cfg, const std::vector<ParamRef>& params, OptimState& optim, LossLog& log,
              std::size_t n_train, BuildLoss&& build, AfterStep&& after) {
  cfg.validate();
  if (cfg.steps == 0) return;
  BatchSampler sampler(n_train, cfg.batch, cfg.seed);
  for (std::uint64_t s = 0; s < cfg.steps; ++s) {
    for (const auto& p : params) p.tensor->zero_grad();
    ad::Tape tape;
    StepLosses losses;
    try {
      losses = build(tape, sampler.indices(s));
    } catch (const NumericError& e) {
      throw NumericError("step " + std::to_string(s) + ": " + e.what());
    }
    const Real total = losses.total.value().item();
    if (!std::isfinite(total)) {
      // Locate the culprit before giving up.
      require_finite(params, s, false);
      throw NumericError("step " + std::to_string(s) + ": non-finite loss");
    }
    tape.backward(losses.total);
    require_finite(params, s, true);
    const Real norm = clip_grad_norm(params, cfg.clip);
    const Real lr = lr_at(s + 1, cfg.lr, cfg.warmup, cfg.steps);
    adamw_step(params, optim, lr, cfg.adamw);
    require_finite(params, s, false);
    log.rows.push_back({s, cfg.stage, lr, losses.task.value().item(),
                        losses.soft.valid() ? losses.soft.value().item() : Real(0), total, norm});
    after(s + 1);
  }
}

// Teacher embeddings per training index, filled on first use.
class TeacherCache {
 public:
  explicit TeacherCache(const ClipModel& teacher) : teacher_(teacher) {}

  LogitPair logits(const Dataset& data, const std::vector<std::size_t>& indices) {
    std::vector<std::size_t> missing;
    for (std::size_t i : indices)
      if (!image_.contains(i)) missing.push_back(i);
    if (!missing.empty()) {
      const Batch b = make_batch(data, missing);
      const Tensor img = encode_image(teacher_, b.images);
      const Tensor txt = encode_text(teacher_, b.tokens);
      const std::size_t e = img.cols();
      for (std::size_t r = 0; r < missing.size(); ++r) {
        image_[missing[r]].assign(img.data().begin() + r * e, img.data().begin() + (r + 1) * e);
        text_[missing[r]].assign(txt.data().begin() + r * e, txt.data().begin() + (r + 1) * e);
      }
    }
    const std::size_t e = image_.at(indices.front()).size();
    Tensor img({indices.size(), e}), txt({indices.size(), e});
    for (std::size_t r = 0; r < indices.size(); ++r) {
      std::copy_n(image_.at(indices[r]).begin(), e, img.data().begin() + r * e);
      std::copy_n(text_.at(indices[r]).begin(), e, txt.data().begin() + r * e);
    }
    return clip_logits(img, txt, teacher_.logit_scale());
  }

 private:
  const ClipModel& teacher_;
  std::unordered_map<std::size_t, std::vector<Real>> image_, text_;
};

GraphLogits student_logits(const EncoderConfig& image_cfg, const EncoderParams<ad::Var>& image,
                           const EncoderConfig& text_cfg, const EncoderParams<ad::Var>& text, ad::Var log_scale,
                           const Batch& batch) {
  ad::Var img = encode_image(image_cfg, image, batch.images);
  ad::Var txt = encode_text(text_cfg, text, batch.tokens);
  return clip_logits(img, txt, ad::exp_clamped(log_scale, ClipModel::kMaxLogitScale));
}

}  // namespace

GraphLogits mapped_student_logits(ad::Tape& tape, const ClipModel& teacher, const TowerMapsT<ad::Var>& image_maps,
                                  const TowerMapsT<ad::Var>& text_maps, const CompressionSpec& spec,
                                  const Batch& batch) {
  auto s_img = build_student_tower(teacher.image.config, bind_constant(tape, teacher.image), image_maps, spec.image);
  auto s_txt = build_student_tower(teacher.text.config, bind_constant(tape, teacher.text), text_maps, spec.text);
  return student_logits(compressed_config(teacher.image.config, spec.image), s_img,
                        compressed_config(teacher.text.config, spec.text), s_txt,
                        tape.constant(teacher.log_logit_scale), batch);
}

MappingResult run_mapping_stage(const ClipModel& teacher, CompressionMaps maps, const CompressionSpec& spec,
                                const Dataset& train, const StageConfig& cfg, const MappingOptions& opts) {
  spec.validate(teacher);
  if (opts.distill) opts.weights.validate();
  MappingResult out;
  maps.set_requires_grad(true);
  auto params = decay_groups(maps.named_params());
  for (auto& p : params) p.decay = false;
  std::unique_ptr<TeacherCache> cache;
  if (opts.distill) cache = std::make_unique<TeacherCache>(teacher);

  auto build = [&](ad::Tape& tape, const std::vector<std::size_t>& idx) {
    const Batch batch = make_batch(train, idx);
    GraphLogits logits = mapped_student_logits(tape, teacher, bind(tape, maps.image), bind(tape, maps.text), spec, batch);
    StepLosses l;
    l.task = clip_task_loss(logits.image_to_text, logits.text_to_image);
    if (opts.distill) {
      l.soft = distill_loss(logits.image_to_text, logits.text_to_image, cache->logits(train, idx));
      l.total = total_loss(l.task, l.soft, opts.weights);
    } else {
      l.total = l.task;
    }
    return l;
  };
  optimize(cfg, params, out.optim, out.log, train.size(), build, [&](std::uint64_t done) {
    if (opts.on_step) opts.on_step(maps, done);
  });
  for (auto& p : params) {
    p.tensor->drop_grad();
    p.tensor->set_requires_grad(false);
  }
  out.maps = std::move(maps);
  return out;
}

TrainResult run_retraining_stage(const ClipModel& teacher, ClipModel student, const Dataset& train,
                                 const StageConfig& cfg, LossWeights weights) {
  weights.validate();
  if (student.image.config.embed_dim != teacher.image.config.embed_dim ||
      student.text.config.embed_dim != teacher.text.config.embed_dim)
    throw DimensionError("retraining: student and teacher embedding widths differ");
  TrainResult out;
  student.set_requires_grad(true);
  auto params = decay_groups(student.named_params());
  TeacherCache cache(teacher);

  auto build = [&](ad::Tape& tape, const std::vector<std::size_t>& idx) {
    const Batch batch = make_batch(train, idx);
    auto img = bind(tape, student.image);
    auto txt = bind(tape, student.text);
    GraphLogits logits = student_logits(student.image.config, img, student.text.config, txt,
                                        tape.leaf(student.log_logit_scale), batch);
    StepLosses l;
    l.task = clip_task_loss(logits.image_to_text, logits.text_to_image);
    l.soft = distill_loss(logits.image_to_text, logits.text_to_image, cache.logits(train, idx));
    l.total = total_loss(l.task, l.soft, weights);
    return l;
  };
  optimize(cfg, params, out.optim, out.log, train.size(), build, [](std::uint64_t) {});
  student.set_requires_grad(false);
  student.zero_grad();
  for (auto& p : params) p.tensor->drop_grad();
  out.model = std::move(student);
  return out;
}

TrainResult pretrain_teacher(ClipModel init, const Dataset& train, const StageConfig& cfg) {
  TrainResult out;
  init.set_requires_grad(true);
  auto params = decay_groups(init.named_params());

  auto build = [&](ad::Tape& tape, const std::vector<std::size_t>& idx) {
    const Batch batch = make_batch(train, idx);
    auto img = bind(tape, init.image);
    auto txt = bind(tape, init.text);
    GraphLogits logits = student_logits(init.image.config, img, init.text.config, txt,
                                        tape.leaf(init.log_logit_scale), batch);
    StepLosses l;
    l.task = clip_task_loss(logits.image_to_text, logits.text_to_image);
    l.total = l.task;
    return l;
  };
  optimize(cfg, params, out.optim, out.log, train.size(), build, [](std::uint64_t) {});
  init.set_requires_grad(false);
  for (auto& p : params) p.tensor->drop_grad();
  out.model = std::move(init);
  return out;
}

Real batch_task_loss(const ClipModel& model, const Batch& batch) {
  const LogitPair l = clip_logits(encode_image(model, batch.images), encode_text(model, batch.tokens),
                                  model.logit_scale());
  return clip_task_loss(l.image_to_text, l.text_to_image);
}

}  // namespace clipmap
