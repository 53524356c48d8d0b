#include "amsam/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace amsam {

AdamWState::AdamWState(AdamWConfig config) : config_(config) {
  if (!(config.beta1 > 0.0 && config.beta1 < 1.0) || !(config.beta2 > 0.0 && config.beta2 < 1.0)) {
    throw std::invalid_argument("AdamW betas must lie in (0, 1)");
  }
  if (!(config.eps > 0.0)) throw std::invalid_argument("AdamW eps must be positive");
  if (!(config.weight_decay >= 0.0)) throw std::invalid_argument("AdamW weight decay must be non-negative");
}

void adamw_step(const std::vector<Parameter>& params, AdamWState& state, double lr) {
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) throw std::invalid_argument("adamw_step: parameter '" + p.name + "' has no gradient");
  }
  if (state.step_count_ == 0) {
    state.first_.clear();
    state.second_.clear();
    for (const auto& p : params) {
      state.first_.emplace_back(p.tensor.numel(), 0.0);
      state.second_.emplace_back(p.tensor.numel(), 0.0);
    }
  } else if (state.first_.size() != params.size()) {
    throw std::invalid_argument("adamw_step: parameter list changed between steps");
  }
  const auto& c = state.config_;
  ++state.step_count_;
  const double t = static_cast<double>(state.step_count_);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  const double decay = 1.0 - lr * c.weight_decay;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor tensor = params[k].tensor;
    auto w = tensor.mutable_data();
    auto g = tensor.grad();
    auto& m = state.first_[k];
    auto& v = state.second_[k];
    if (m.size() != w.size()) throw std::invalid_argument("adamw_step: size of '" + params[k].name + "' changed");
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      w[i] = w[i] * decay - lr * m_hat / (std::sqrt(v_hat) + c.eps);
    }
  }
}

double lr_at(const LrSchedule& schedule, std::size_t iteration) {
  if (schedule.iter_max == 0) throw std::invalid_argument("lr schedule needs iter_max > 0");
  if (iteration > schedule.iter_max) {
    throw std::out_of_range("lr_at: iteration " + std::to_string(iteration) + " exceeds iter_max " +
                            std::to_string(schedule.iter_max));
  }
  const double frac = 1.0 - static_cast<double>(iteration) / static_cast<double>(schedule.iter_max);
  return schedule.lr0 * std::pow(frac, schedule.exponent);
}

}  // namespace amsam
