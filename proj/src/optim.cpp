#include "clipmap/optim.hpp"

#include <cmath>
#include <numbers>

#include "clipmap/errors.hpp"

namespace clipmap {

std::vector<ParamRef> decay_groups(const std::vector<std::pair<std::string, Tensor*>>& named) {
  std::vector<ParamRef> out;
  out.reserve(named.size());
  for (const auto& [name, t] : named) out.push_back({name, t, t->rank() >= 2 && name != "logit_scale"});
  return out;
}

void OptimState::bind(const std::vector<ParamRef>& params) {
  if (m.empty() && v.empty()) {
    for (const auto& p : params) {
      m.emplace_back(p.tensor->shape());
      v.emplace_back(p.tensor->shape());
    }
    return;
  }
  if (m.size() != params.size() || v.size() != params.size())
    throw DimensionError("optimizer state holds " + std::to_string(m.size()) + " moments for " +
                         std::to_string(params.size()) + " parameters");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (m[i].shape() != params[i].tensor->shape() || v[i].shape() != params[i].tensor->shape())
      throw DimensionError("optimizer moment for " + params[i].name + " has shape " + shape_str(m[i].shape()));
}

void adamw_step(const std::vector<ParamRef>& params, OptimState& state, Real lr, const AdamWConfig& cfg) {
  state.bind(params);
  ++state.step;
  const Real t = Real(state.step);
  const Real c1 = Real(1) - std::pow(cfg.beta1, t);
  const Real c2 = Real(1) - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i].tensor;
    auto w = p.data();
    auto g = p.grad();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    const Real decay = params[i].decay ? lr * cfg.weight_decay : Real(0);
    for (std::size_t j = 0; j < w.size(); ++j) {
      const Real gj = g.empty() ? Real(0) : g[j];
      w[j] -= decay * w[j];
      m[j] = cfg.beta1 * m[j] + (Real(1) - cfg.beta1) * gj;
      v[j] = cfg.beta2 * v[j] + (Real(1) - cfg.beta2) * gj * gj;
      w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg.eps);
    }
  }
}

Real lr_at(std::uint64_t step, Real base, std::uint64_t warmup, std::uint64_t total) {
  if (step >= total) return 0;
  if (step < warmup) return base * Real(step) / Real(warmup);
  const Real progress = Real(step - warmup) / Real(total - warmup);
  return base * Real(0.5) * (Real(1) + std::cos(std::numbers::pi_v<Real> * progress));
}

Real global_grad_norm(const std::vector<ParamRef>& params) {
  Real sq = 0;
  for (const auto& p : params)
    for (Real g : p.tensor->grad()) sq += g * g;
  return std::sqrt(sq);
}

Real clip_grad_norm(const std::vector<ParamRef>& params, Real max_norm) {
  const Real norm = global_grad_norm(params);
  if (norm > max_norm) {
    const Real s = max_norm / norm;
    for (const auto& p : params)
      for (Real& g : p.tensor->grad()) g *= s;
  }
  return norm;
}

}  // namespace clipmap
