#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "amsam/tensor.hpp"

namespace testing {

using amsam::Shape;
using amsam::Tensor;

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
  return Tensor::randn(std::move(shape), rng, stddev, true);
}

inline Shape random_shape(std::mt19937_64& rng, std::size_t rank, std::size_t max_dim) {
  std::uniform_int_distribution<std::size_t> d(1, max_dim);
  Shape s(rank);
  for (auto& x : s) x = d(rng);
  return s;
}

/// Largest normwise relative error, over `inputs`, between reverse-mode
/// gradients of `loss()` and central differences with step h:
/// max_k |g_k - fd_k| / max(max_k |g_k|, max_k |fd_k|, 1e-6) over the probed
/// elements of each input. At most `max_probes` elements per input are
/// perturbed (chosen at random when the tensor is larger).
inline double max_grad_error(const std::function<Tensor()>& loss, const std::vector<Tensor>& inputs,
                             std::mt19937_64& rng, double h = 1e-5, std::size_t max_probes = 12) {
  for (const auto& t : inputs) {
    Tensor x = t;
    x.zero_grad();
  }
  loss().backward();
  std::vector<std::vector<double>> analytic;
  for (const auto& t : inputs) {
    if (!t.has_grad()) {
      analytic.emplace_back(t.numel(), 0.0);
      continue;
    }
    auto g = t.grad();
    analytic.emplace_back(g.begin(), g.end());
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor x = inputs[i];
    std::vector<std::size_t> probes(x.numel());
    for (std::size_t k = 0; k < probes.size(); ++k) probes[k] = k;
    if (probes.size() > max_probes) {
      std::shuffle(probes.begin(), probes.end(), rng);
      probes.resize(max_probes);
    }
    double diff = 0.0, scale = 1e-6;
    for (std::size_t k : probes) {
      const double saved = x.data()[k];
      x.mutable_data()[k] = saved + h;
      const double up = loss().item();
      x.mutable_data()[k] = saved - h;
      const double down = loss().item();
      x.mutable_data()[k] = saved;
      const double fd = (up - down) / (2.0 * h);
      diff = std::max(diff, std::abs(analytic[i][k] - fd));
      scale = std::max({scale, std::abs(analytic[i][k]), std::abs(fd)});
    }
    worst = std::max(worst, diff / scale);
  }
  for (const auto& t : inputs) {
    Tensor x = t;
    x.zero_grad();
  }
  return worst;
}

/// Weighted sum with fixed random weights: a scalar whose gradient reaches every output element.
inline Tensor probe_sum(const Tensor& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor w = Tensor::randn(y.shape(), rng);
  return amsam::sum_all(amsam::hadamard(y, w));
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("amsam_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// Plain loop reference of the Hadamard calibration.
inline std::vector<double> calibrate_reference(const Tensor& U, const Tensor& H, bool per_batch) {
  const std::size_t b = U.dim(0), c = U.dim(1), h = U.dim(2), w = U.dim(3), n = H.dim(1);
  std::vector<double> out(b * n * h * w, 0.0);
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          double acc = 0.0;
          if (per_batch) {
            for (std::size_t k = 0; k < c; ++k) acc += H.at({bi, i, k}) * U.at({bi, k, y, x});
            acc /= static_cast<double>(c);
          } else {
            for (std::size_t bj = 0; bj < b; ++bj) {
              for (std::size_t k = 0; k < c; ++k) acc += H.at({bj, i, k}) * U.at({bj, k, y, x});
            }
            acc /= static_cast<double>(b * c);
          }
          out[((bi * n + i) * h + y) * w + x] = acc;
        }
      }
    }
  }
  return out;
}

}  // namespace testing
