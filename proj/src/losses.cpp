#include "clipmap/losses.hpp"

#include <cmath>
#include <numeric>

#include "clipmap/errors.hpp"

namespace clipmap {

void LossWeights::validate() const {
  if (!(lambda >= 0 && lambda <= 1)) throw ConfigError("loss.lambda must lie in [0, 1], got " + std::to_string(lambda));
}

namespace {

void require_square(const Shape& a, const Shape& b, const char* who) {
  if (a.size() != 2 || a[0] != a[1] || a != b)
    throw ContractError(std::string(who) + ": logits must be square and equal-shaped, got " + shape_str(a) + " and " +
                        shape_str(b));
}

std::vector<std::size_t> diagonal_labels(std::size_t n) {
  std::vector<std::size_t> labels(n);
  std::iota(labels.begin(), labels.end(), std::size_t{0});
  return labels;
}

}  // namespace

ad::Var clip_task_loss(ad::Var image_to_text, ad::Var text_to_image) {
  require_square(image_to_text.shape(), text_to_image.shape(), "clip_task_loss");
  const auto labels = diagonal_labels(image_to_text.shape()[0]);
  return ad::add(ad::cross_entropy_labels(image_to_text, labels), ad::cross_entropy_labels(text_to_image, labels));
}

Real clip_task_loss(const Tensor& image_to_text, const Tensor& text_to_image) {
  ad::Tape tape;
  return clip_task_loss(tape.constant(image_to_text), tape.constant(text_to_image)).value().item();
}

ad::Var distill_loss(ad::Var student_i2t, ad::Var student_t2i, const LogitPair& teacher) {
  require_square(student_i2t.shape(), student_t2i.shape(), "distill_loss");
  if (teacher.image_to_text.shape() != student_i2t.shape() || teacher.text_to_image.shape() != student_t2i.shape())
    throw ContractError("distill_loss: teacher logits " + shape_str(teacher.image_to_text.shape()) +
                        " do not match student logits " + shape_str(student_i2t.shape()));
  return ad::add(ad::cross_entropy_soft(student_i2t, ad::softmax_rows(teacher.image_to_text)),
                 ad::cross_entropy_soft(student_t2i, ad::softmax_rows(teacher.text_to_image)));
}

Real distill_loss(const LogitPair& student, const LogitPair& teacher) {
  ad::Tape tape;
  return distill_loss(tape.constant(student.image_to_text), tape.constant(student.text_to_image), teacher)
      .value()
      .item();
}

ad::Var total_loss(ad::Var task, ad::Var soft, LossWeights w) {
  w.validate();
  return ad::add(ad::scale(task, Real(1) - w.lambda), ad::scale(soft, w.lambda));
}

Real total_loss(Real task, Real soft, LossWeights w) {
  w.validate();
  return (Real(1) - w.lambda) * task + w.lambda * soft;
}

Real mean_row_entropy(const Tensor& probs) {
  const std::size_t rows = probs.rows(), cols = probs.cols();
  Real total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    Real h = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      const Real p = probs.at(r, c);
      if (p > 0) h -= p * std::log(p);
    }
    total += h;
  }
  return total / Real(rows);
}

}  // namespace clipmap
