#pragma once

#include <string>
#include <vector>

#include "amsam/tensor.hpp"

namespace amsam {

/// One grayscale image (1, H, W) in [0,1] with its binary mask (H, W).
struct Sample {
  std::string id;
  Tensor image;
  Tensor mask;
};

void validate_sample(const Sample& sample);

}  // namespace amsam
