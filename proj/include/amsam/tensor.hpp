#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace amsam {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Raised for any shape or axis inconsistency. The message names the shapes involved.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for invalid configuration values (ranks, weights, sizes).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }
  std::vector<double>& grad_buffer();
};

}  // namespace detail

/// Dense row-major tensor of doubles with an optional gradient record.
///
/// A Tensor is a shared handle: copies alias the same storage. Operations
/// whose inputs require grad return tensors that remember how to push
/// gradients back to those inputs; backward() on a scalar result walks
/// the recorded graph once in reverse topological order.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor ones(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0, bool requires_grad = false);
  static Tensor uniform(Shape shape, std::mt19937_64& rng, double lo, double hi, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return data().size(); }

  std::span<const double> data() const;
  /// Mutable view of the values. Only meaningful on leaves (optimizer updates, test perturbation).
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  /// Only valid on leaf tensors.
  void set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  /// Value copy with no gradient record.
  Tensor detach() const;
  /// Deep copy of the values keeping requires_grad (new leaf).
  Tensor clone() const;

  /// Reverse-mode sweep from this scalar. Leaf grads accumulate additively.
  void backward() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Reverse topological ordering of the records reachable from a scalar loss.
/// records.front() is the loss; every record appears before all of its inputs.
struct GradTape {
  std::vector<detail::Node*> records;
};

GradTape build_tape(const Tensor& loss);

// --- elementwise (equal rank; a size-1 suffix on either side broadcasts) ---
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
Tensor gelu(const Tensor& x);
/// x + bias where bias has shape (x.shape().back()).
Tensor add_bias(const Tensor& x, const Tensor& bias);

// --- linear algebra ---
/// (..., m, k) x (..., k, p). b is either rank 2 (shared across the batch) or
/// has exactly the leading dimensions of a.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose_last2(const Tensor& x);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor reshape(const Tensor& x, Shape shape);

// --- structural ---
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor concat_axis0(const std::vector<Tensor>& parts);
Tensor slice_axis(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
Tensor repeat_axis(const Tensor& x, std::size_t axis, std::size_t times);

// --- reductions ---
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor sum_lastdim(const Tensor& x);
Tensor mean_axis0(const Tensor& x);

// --- normalisation and probabilities ---
Tensor softmax_lastdim(const Tensor& x);
Tensor log_softmax_lastdim(const Tensor& x);
/// Picks x[..., index[i]] for every leading position i.
Tensor pick_lastdim(const Tensor& x, const std::vector<std::size_t>& index);
/// Normalises over the last axis, then applies gamma/beta (both shape (d)).
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);

// --- convolution ---
/// Stride-2, kernel-2, unpadded transposed convolution.
/// x: (B, Cin, H, W); kernel: (Cin, Cout, 2, 2); bias: (Cout) -> (B, Cout, 2H, 2W).
Tensor conv_transpose2x2(const Tensor& x, const Tensor& kernel, const Tensor& bias);

/// FNV-1a over the raw bytes of the values; used for freeze/level-separation checks.
std::uint64_t checksum(const Tensor& t);
std::uint64_t checksum(const std::vector<Tensor>& tensors);

}  // namespace amsam
