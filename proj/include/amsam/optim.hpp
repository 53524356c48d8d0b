#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "amsam/tensor.hpp"

namespace amsam {

/// A trainable tensor together with the name it is reported and serialised under.
struct Parameter {
  std::string name;
  Tensor tensor;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

/// Moment buffers for one parameter group. Moments start at zero and are
/// sized on the first step.
class AdamWState {
 public:
  explicit AdamWState(AdamWConfig config = {});

  const AdamWConfig& config() const { return config_; }
  std::size_t step_count() const { return step_count_; }
  const std::vector<std::vector<double>>& first_moment() const { return first_; }
  const std::vector<std::vector<double>>& second_moment() const { return second_; }

 private:
  friend void adamw_step(const std::vector<Parameter>& params, AdamWState& state, double lr);

  AdamWConfig config_;
  std::size_t step_count_ = 0;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
};

/// One decoupled-weight-decay Adam update: p <- p(1 - lr*wd), then the
/// bias-corrected Adam step. Gradients are read, never cleared.
void adamw_step(const std::vector<Parameter>& params, AdamWState& state, double lr);

/// Polynomial decay lr(i) = lr0 * (1 - i/iter_max)^exponent.
struct LrSchedule {
  double lr0 = 0.0;
  std::size_t iter_max = 1;
  double exponent = 0.9;
};

double lr_at(const LrSchedule& schedule, std::size_t iteration);

}  // namespace amsam
