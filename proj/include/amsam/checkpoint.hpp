#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "amsam/tensor.hpp"

namespace amsam {

/// Ordered key=value pairs; used for config snapshots and config files.
using KeyValues = std::vector<std::pair<std::string, std::string>>;

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;

  bool operator==(const NamedTensor&) const = default;
};

/// Trainable state of a model plus what is needed to rebuild the frozen parts.
///
/// The frozen backbone is not stored: it is regenerated from the seeds in
/// `config`. `tensors` holds every trainable tensor of W and the prompt
/// embedding A.
struct Checkpoint {
  KeyValues config;
  std::vector<NamedTensor> tensors;
  double best_d2_dice = 0.0;
  std::size_t best_epoch = 0;

  bool operator==(const Checkpoint&) const = default;
};

}  // namespace amsam
