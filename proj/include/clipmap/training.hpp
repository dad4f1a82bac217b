#pragma once

// Teacher pretraining and the two compression stages. Every stage runs the
// same loop: sample a batch, build the loss on a fresh tape, backprop, clip
// the global gradient norm, and take one AdamW step at lr_at(step + 1).
// Non-finite values abort with NumericError naming the step and tensor.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "clipmap/data.hpp"
#include "clipmap/losses.hpp"
#include "clipmap/mapping.hpp"
#include "clipmap/model.hpp"
#include "clipmap/optim.hpp"

namespace clipmap {

enum class Stage { Teacher, Mapping, Retraining };

std::string stage_name(Stage s);

struct StageConfig {
  Stage stage = Stage::Mapping;
  std::uint64_t steps = 0;
  std::uint64_t warmup = 0;
  std::size_t batch = 64;
  Real lr = Real(1e-3);
  Real clip = 5;
  AdamWConfig adamw;
  std::uint64_t seed = 0;  // batch order

  // Throws ConfigError unless warmup < steps (when steps > 0) and clip > 0.
  void validate() const;
};

struct LossRecord {
  std::uint64_t step = 0;  // 0-based; losses are measured before the update
  Stage stage = Stage::Mapping;
  Real lr = 0;
  Real task_loss = 0;
  Real soft_loss = 0;
  Real total_loss = 0;
  Real grad_norm = 0;  // before clipping
};

struct LossLog {
  std::vector<LossRecord> rows;

  static constexpr const char* kHeader = "step,stage,lr,task_loss,soft_loss,total_loss,grad_norm";
  std::string csv() const;
};

struct MappingOptions {
  bool distill = false;  // add the soft term against the teacher's logits
  LossWeights weights;   // used only with distill
  // Called after each update with the number of completed steps.
  std::function<void(const CompressionMaps&, std::uint64_t)> on_step;
};

struct MappingResult {
  CompressionMaps maps;
  LossLog log;
  OptimState optim;
};

// Logits of the student induced by `image_maps`/`text_maps`, with the teacher
// and its logit scale entering as constants.
GraphLogits mapped_student_logits(ad::Tape& tape, const ClipModel& teacher, const TowerMapsT<ad::Var>& image_maps,
                                  const TowerMapsT<ad::Var>& text_maps, const CompressionSpec& spec,
                                  const Batch& batch);

// Trains only the maps; the teacher enters every step as constants.
MappingResult run_mapping_stage(const ClipModel& teacher, CompressionMaps maps, const CompressionSpec& spec,
                                const Dataset& train, const StageConfig& cfg, const MappingOptions& opts = {});

struct TrainResult {
  ClipModel model;
  LossLog log;
  OptimState optim;
};

// Trains every student tensor, logit scale included, on (1 − λ)·task + λ·soft.
TrainResult run_retraining_stage(const ClipModel& teacher, ClipModel student, const Dataset& train,
                                 const StageConfig& cfg, LossWeights weights);

// Plain contrastive training from `init`.
TrainResult pretrain_teacher(ClipModel init, const Dataset& train, const StageConfig& cfg);

// Forward-only loss of `model` on one batch.
Real batch_task_loss(const ClipModel& model, const Batch& batch);

}  // namespace clipmap
