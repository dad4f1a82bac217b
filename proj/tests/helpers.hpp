#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "clipmap/autodiff.hpp"
#include "clipmap/rng.hpp"
#include "clipmap/tensor.hpp"

namespace testing_util {

using clipmap::Real;
using clipmap::Shape;
using clipmap::Tensor;
namespace ad = clipmap::ad;

inline Tensor random_tensor(Shape shape, clipmap::Rng& rng, Real std = 1) {
  Tensor t(std::move(shape));
  rng.fill_normal(t, std);
  return t;
}

inline Real rel_err(Real a, Real n, Real floor) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

// Builds a scalar loss over `inputs` bound as leaves.
using LossFn = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

struct GradCheck {
  Real max_rel = 0;
  std::size_t checked = 0;
};

// Compares backward() against central differences on every element of every
// input (or on `per_input` sampled entries when nonzero).
inline GradCheck grad_check(std::vector<Tensor> inputs, const LossFn& f, Real h = Real(1e-4),
                            std::size_t per_input = 0, std::uint64_t seed = 7, Real floor = Real(1e-7)) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    for (auto& t : inputs) vars.push_back(tape.leaf(t));
    tape.backward(f(tape, vars));
  }
  auto value_at = [&]() {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    for (auto& t : inputs) vars.push_back(tape.constant(t));
    return f(tape, vars).value().item();
  };
  clipmap::Rng rng(seed);
  GradCheck out;
  for (auto& t : inputs) {
    std::vector<std::size_t> idx;
    if (per_input == 0 || per_input >= t.numel()) {
      for (std::size_t i = 0; i < t.numel(); ++i) idx.push_back(i);
    } else {
      for (std::size_t i = 0; i < per_input; ++i) idx.push_back(rng.below(t.numel()));
    }
    for (std::size_t i : idx) {
      const Real saved = t[i];
      t[i] = saved + h;
      const Real up = value_at();
      t[i] = saved - h;
      const Real down = value_at();
      t[i] = saved;
      const Real numeric = (up - down) / (2 * h);
      out.max_rel = std::max(out.max_rel, rel_err(t.grad()[i], numeric, floor));
      ++out.checked;
    }
  }
  return out;
}

}  // namespace testing_util
