#pragma once

#include "clipmap/autodiff.hpp"
#include "clipmap/model.hpp"
#include "clipmap/tensor.hpp"

namespace clipmap {

struct LossWeights {
  Real lambda = 1;  // weight of the distillation term

  // Throws ConfigError unless 0 <= lambda <= 1.
  void validate() const;
};

// Sum of the two directional mean cross-entropies against the diagonal.
ad::Var clip_task_loss(ad::Var image_to_text, ad::Var text_to_image);
Real clip_task_loss(const Tensor& image_to_text, const Tensor& text_to_image);

// Soft cross-entropy of the student against softmax(teacher) in both
// directions. Teacher logits are plain values, never on the tape.
ad::Var distill_loss(ad::Var student_i2t, ad::Var student_t2i, const LogitPair& teacher);
Real distill_loss(const LogitPair& student, const LogitPair& teacher);

// (1 − λ)·task + λ·soft.
ad::Var total_loss(ad::Var task, ad::Var soft, LossWeights w);
Real total_loss(Real task, Real soft, LossWeights w);

// Mean over rows of −Σ p·log p.
Real mean_row_entropy(const Tensor& probs);

}  // namespace clipmap
