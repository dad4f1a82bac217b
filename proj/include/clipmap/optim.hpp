#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "clipmap/tensor.hpp"

namespace clipmap {

struct AdamWConfig {
  Real beta1 = Real(0.9);
  Real beta2 = Real(0.98);
  Real eps = Real(1e-8);
  Real weight_decay = 0;
};

struct ParamRef {
  std::string name;
  Tensor* tensor = nullptr;
  bool decay = true;
};

// Matrices decay; vectors, scalars, and the logit scale do not.
std::vector<ParamRef> decay_groups(const std::vector<std::pair<std::string, Tensor*>>& named);

struct OptimState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t step = 0;  // updates applied so far

  // Allocates zero moments mirroring `params` when empty; otherwise checks shapes.
  void bind(const std::vector<ParamRef>& params);
};

// One decoupled-decay Adam update using each tensor's grad (absent = zero).
void adamw_step(const std::vector<ParamRef>& params, OptimState& state, Real lr, const AdamWConfig& cfg);

// Linear warmup to `base` at step == warmup, then cosine decay to 0 at
// step == total. Update number t (1-based) uses lr_at(t).
Real lr_at(std::uint64_t step, Real base, std::uint64_t warmup, std::uint64_t total);

// Global L2 norm over all grads.
Real global_grad_norm(const std::vector<ParamRef>& params);
// Scales grads so the global norm is at most max_norm; returns the norm before clipping.
Real clip_grad_norm(const std::vector<ParamRef>& params, Real max_norm);

}  // namespace clipmap
