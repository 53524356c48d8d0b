#include <algorithm>
#include <cmath>
#include <numbers>

#include "amsam/tensor.hpp"

namespace amsam {

namespace {

using detail::Node;
using BackwardFn = std::function<void(Node&)>;

Tensor make_op(Shape shape, std::vector<double> data, const char* op, const std::vector<Tensor>& inputs,
               BackwardFn backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  bool needs_grad = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (needs_grad) {
    node->requires_grad = true;
    for (const auto& t : inputs) node->parents.push_back(t.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

// Broadcast plan for one operand of an equal-rank elementwise op: operand flat
// index = output flat index / inner.
struct Broadcast {
  Shape out;
  std::size_t inner_a = 1;
  std::size_t inner_b = 1;
};

std::size_t suffix_inner(const Shape& operand, const Shape& out, const char* op, const Shape& a, const Shape& b) {
  std::size_t s = operand.size();
  while (s > 0 && operand[s - 1] == 1) --s;
  for (std::size_t j = 0; j < s; ++j) {
    if (operand[j] != out[j]) {
      throw DimensionError(std::string(op) + ": shapes " + shape_to_string(a) + " and " + shape_to_string(b) +
                           " are not broadcastable (only trailing singleton dimensions broadcast)");
    }
  }
  std::size_t inner = 1;
  for (std::size_t j = s; j < out.size(); ++j) inner *= out[j];
  return inner;
}

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  if (a.size() != b.size()) {
    throw DimensionError(std::string(op) + ": rank mismatch between " + shape_to_string(a) + " and " +
                         shape_to_string(b));
  }
  Broadcast plan;
  plan.out.resize(a.size());
  for (std::size_t j = 0; j < a.size(); ++j) {
    if (a[j] != b[j] && a[j] != 1 && b[j] != 1) {
      throw DimensionError(std::string(op) + ": shapes " + shape_to_string(a) + " and " + shape_to_string(b) +
                           " are not broadcastable");
    }
    plan.out[j] = std::max(a[j], b[j]);
  }
  plan.inner_a = a == plan.out ? 1 : suffix_inner(a, plan.out, op, a, b);
  plan.inner_b = b == plan.out ? 1 : suffix_inner(b, plan.out, op, a, b);
  return plan;
}

template <typename Fwd, typename DA, typename DB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, DA da, DB db) {
  Broadcast plan = plan_broadcast(a.shape(), b.shape(), name);
  const std::size_t n = shape_numel(plan.out);
  std::vector<double> out(n);
  auto ad = a.data();
  auto bd = b.data();
  const std::size_t ia = plan.inner_a, ib = plan.inner_b;
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(ad[i / ia], bd[i / ib]);
  return make_op(plan.out, std::move(out), name, {a, b}, [ia, ib, n, da, db](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    const auto& g = self.grad;
    if (pa.requires_grad) {
      auto& ga = pa.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) ga[i / ia] += g[i] * da(pa.data[i / ia], pb.data[i / ib]);
    }
    if (pb.requires_grad) {
      auto& gb = pb.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) gb[i / ib] += g[i] * db(pa.data[i / ia], pb.data[i / ib]);
    }
  });
}

template <typename Fwd, typename Deriv>
Tensor unary_op(const Tensor& x, const char* name, Fwd fwd, Deriv deriv) {
  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = fwd(xd[i]);
  return make_op(x.shape(), std::move(out), name, {x}, [deriv](Node& self) {
    Node& px = parent(self, 0);
    auto& gx = px.grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * deriv(px.data[i]);
  });
}

std::size_t prod(const Shape& s, std::size_t from, std::size_t to) {
  std::size_t p = 1;
  for (std::size_t j = from; j < to; ++j) p *= s[j];
  return p;
}

void require_rank_at_least(const Tensor& x, std::size_t r, const char* op) {
  if (x.rank() < r) {
    throw DimensionError(std::string(op) + ": expected rank >= " + std::to_string(r) + ", got shape " +
                         shape_to_string(x.shape()));
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "hadamard", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor scale(const Tensor& x, double factor) {
  return unary_op(
      x, "scale", [factor](double v) { return factor * v; }, [factor](double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary_op(
      x, "add_scalar", [value](double v) { return v + value; }, [](double) { return 1.0; });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary_op(
      x, "gelu", [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [inv_sqrt_2pi](double v) {
        return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
      });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_rank_at_least(x, 1, "add_bias");
  const std::size_t d = x.shape().back();
  if (bias.rank() != 1 || bias.dim(0) != d) {
    throw DimensionError("add_bias: bias " + shape_to_string(bias.shape()) + " does not match " +
                         shape_to_string(x.shape()));
  }
  auto xd = x.data();
  auto bd = bias.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = xd[i] + bd[i % d];
  return make_op(x.shape(), std::move(out), "add_bias", {x, bias}, [d](Node& self) {
    Node& px = parent(self, 0);
    Node& pb = parent(self, 1);
    if (px.requires_grad) {
      auto& gx = px.grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      auto& gb = pb.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i % d] += self.grad[i];
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank_at_least(a, 2, "matmul");
  require_rank_at_least(b, 2, "matmul");
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  const std::size_t m = as[as.size() - 2], k = as.back();
  const std::size_t kb = bs[bs.size() - 2], p = bs.back();
  const bool shared_b = bs.size() == 2;
  bool ok = k == kb;
  if (ok && !shared_b) {
    ok = as.size() == bs.size() && std::equal(as.begin(), as.end() - 2, bs.begin());
  }
  if (!ok) {
    throw DimensionError("matmul: incompatible shapes " + shape_to_string(as) + " and " + shape_to_string(bs));
  }
  const std::size_t batch = prod(as, 0, as.size() - 2);
  Shape out_shape(as.begin(), as.end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(p);
  std::vector<double> out(batch * m * p, 0.0);
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t t = 0; t < batch; ++t) {
    const double* A = ad.data() + t * m * k;
    const double* B = bd.data() + (shared_b ? 0 : t * k * p);
    double* C = out.data() + t * m * p;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t l = 0; l < k; ++l) {
        const double av = A[i * k + l];
        const double* Brow = B + l * p;
        double* Crow = C + i * p;
        for (std::size_t j = 0; j < p; ++j) Crow[j] += av * Brow[j];
      }
    }
  }
  return make_op(std::move(out_shape), std::move(out), "matmul", {a, b},
                 [batch, m, k, p, shared_b](Node& self) {
                   Node& pa = parent(self, 0);
                   Node& pb = parent(self, 1);
                   const auto& g = self.grad;
                   if (pa.requires_grad) {
                     auto& ga = pa.grad_buffer();
                     for (std::size_t t = 0; t < batch; ++t) {
                       const double* G = g.data() + t * m * p;
                       const double* B = pb.data.data() + (shared_b ? 0 : t * k * p);
                       double* GA = ga.data() + t * m * k;
                       for (std::size_t i = 0; i < m; ++i) {
                         for (std::size_t l = 0; l < k; ++l) {
                           double acc = 0.0;
                           for (std::size_t j = 0; j < p; ++j) acc += G[i * p + j] * B[l * p + j];
                           GA[i * k + l] += acc;
                         }
                       }
                     }
                   }
                   if (pb.requires_grad) {
                     auto& gb = pb.grad_buffer();
                     for (std::size_t t = 0; t < batch; ++t) {
                       const double* G = g.data() + t * m * p;
                       const double* A = pa.data.data() + t * m * k;
                       double* GB = gb.data() + (shared_b ? 0 : t * k * p);
                       for (std::size_t i = 0; i < m; ++i) {
                         for (std::size_t l = 0; l < k; ++l) {
                           const double av = A[i * k + l];
                           for (std::size_t j = 0; j < p; ++j) GB[l * p + j] += av * G[i * p + j];
                         }
                       }
                     }
                   }
                 });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const Shape& xs = x.shape();
  const std::size_t r = xs.size();
  std::vector<bool> seen(r, false);
  if (axes.size() != r) throw DimensionError("permute: axis list does not match shape " + shape_to_string(xs));
  for (auto a : axes) {
    if (a >= r || seen[a]) throw DimensionError("permute: invalid axis list for shape " + shape_to_string(xs));
    seen[a] = true;
  }
  Shape out_shape(r);
  for (std::size_t j = 0; j < r; ++j) out_shape[j] = xs[axes[j]];
  // in_strides[axes[j]] is the input stride walked by output axis j.
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t j = r; j-- > 1;) in_strides[j - 1] = in_strides[j] * xs[j];
  std::vector<std::size_t> walk(r);
  for (std::size_t j = 0; j < r; ++j) walk[j] = in_strides[axes[j]];
  const std::size_t n = x.numel();
  // map[out_flat] = in_flat
  auto map = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t in_flat = 0;
  for (std::size_t o = 0; o < n; ++o) {
    (*map)[o] = in_flat;
    for (std::size_t j = r; j-- > 0;) {
      ++idx[j];
      in_flat += walk[j];
      if (idx[j] < out_shape[j]) break;
      in_flat -= walk[j] * idx[j];
      idx[j] = 0;
    }
  }
  auto xd = x.data();
  std::vector<double> out(n);
  for (std::size_t o = 0; o < n; ++o) out[o] = xd[(*map)[o]];
  return make_op(std::move(out_shape), std::move(out), "permute", {x}, [map](Node& self) {
    auto& gx = parent(self, 0).grad_buffer();
    for (std::size_t o = 0; o < map->size(); ++o) gx[(*map)[o]] += self.grad[o];
  });
}

Tensor transpose_last2(const Tensor& x) {
  require_rank_at_least(x, 2, "transpose_last2");
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
  return permute(x, axes);
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_to_string(x.shape()) + " as " + shape_to_string(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_op(std::move(shape), std::move(out), "reshape", {x}, [](Node& self) {
    auto& gx = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: empty list of tensors");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range for shape " + shape_to_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t j = 0; ok && j < s.size(); ++j) ok = j == axis || s[j] == first[j];
    if (!ok) {
      throw DimensionError("concat: shape " + shape_to_string(s) + " incompatible with " + shape_to_string(first) +
                           " along axis " + std::to_string(axis));
    }
    out_shape[axis] += s[axis];
  }
  const std::size_t outer = prod(first, 0, axis);
  const std::size_t trailing = prod(first, axis + 1, first.size());
  std::vector<std::size_t> widths;
  std::size_t row = 0;
  for (const auto& p : parts) {
    widths.push_back(p.dim(axis) * trailing);
    row += widths.back();
  }
  std::vector<double> out(outer * row);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto pd = parts[k].data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pd.data() + o * widths[k], widths[k], out.data() + o * row + offset);
    }
    offset += widths[k];
  }
  return make_op(std::move(out_shape), std::move(out), "concat", parts, [outer, row, widths](Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      Node& pk = parent(self, k);
      if (pk.requires_grad) {
        auto& g = pk.grad_buffer();
        for (std::size_t o = 0; o < outer; ++o) {
          const double* src = self.grad.data() + o * row + off;
          double* dst = g.data() + o * widths[k];
          for (std::size_t i = 0; i < widths[k]; ++i) dst[i] += src[i];
        }
      }
      off += widths[k];
    }
  });
}

Tensor concat_axis0(const std::vector<Tensor>& parts) { return concat(parts, 0); }

Tensor slice_axis(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& xs = x.shape();
  if (axis >= xs.size()) throw DimensionError("slice_axis: axis out of range for shape " + shape_to_string(xs));
  if (length == 0 || start + length > xs[axis]) {
    throw DimensionError("slice_axis: range [" + std::to_string(start) + "," + std::to_string(start + length) +
                         ") outside axis " + std::to_string(axis) + " of " + shape_to_string(xs));
  }
  const std::size_t outer = prod(xs, 0, axis);
  const std::size_t trailing = prod(xs, axis + 1, xs.size());
  const std::size_t in_row = xs[axis] * trailing;
  const std::size_t out_row = length * trailing;
  const std::size_t off = start * trailing;
  Shape out_shape = xs;
  out_shape[axis] = length;
  auto xd = x.data();
  std::vector<double> out(outer * out_row);
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(xd.data() + o * in_row + off, out_row, out.data() + o * out_row);
  return make_op(std::move(out_shape), std::move(out), "slice", {x}, [outer, in_row, out_row, off](Node& self) {
    auto& gx = parent(self, 0).grad_buffer();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < out_row; ++i) gx[o * in_row + off + i] += self.grad[o * out_row + i];
    }
  });
}

Tensor repeat_axis(const Tensor& x, std::size_t axis, std::size_t times) {
  const Shape& xs = x.shape();
  if (axis >= xs.size()) throw DimensionError("repeat_axis: axis out of range for shape " + shape_to_string(xs));
  if (times == 0) throw DimensionError("repeat_axis: times must be positive");
  const std::size_t outer = prod(xs, 0, axis);
  const std::size_t slab = xs[axis] * prod(xs, axis + 1, xs.size());
  Shape out_shape = xs;
  out_shape[axis] *= times;
  auto xd = x.data();
  std::vector<double> out(outer * slab * times);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t t = 0; t < times; ++t) {
      std::copy_n(xd.data() + o * slab, slab, out.data() + (o * times + t) * slab);
    }
  }
  return make_op(std::move(out_shape), std::move(out), "repeat", {x}, [outer, slab, times](Node& self) {
    auto& gx = parent(self, 0).grad_buffer();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t t = 0; t < times; ++t) {
        const double* src = self.grad.data() + (o * times + t) * slab;
        for (std::size_t i = 0; i < slab; ++i) gx[o * slab + i] += src[i];
      }
    }
  });
}

Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_op({1}, {s}, "sum_all", {x}, [](Node& self) {
    auto& gx = parent(self, 0).grad_buffer();
    for (auto& g : gx) g += self.grad[0];
  });
}

Tensor mean_all(const Tensor& x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.numel())); }

Tensor sum_lastdim(const Tensor& x) {
  require_rank_at_least(x, 1, "sum_lastdim");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.numel() / d;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  if (out_shape.empty()) out_shape.push_back(1);
  auto xd = x.data();
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < d; ++j) out[r] += xd[r * d + j];
  }
  return make_op(std::move(out_shape), std::move(out), "sum_lastdim", {x}, [d, rows](Node& self) {
    auto& gx = parent(self, 0).grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += self.grad[r];
    }
  });
}

Tensor mean_axis0(const Tensor& x) {
  require_rank_at_least(x, 1, "mean_axis0");
  const std::size_t d0 = x.dim(0);
  const std::size_t slab = x.numel() / d0;
  Shape out_shape = x.shape();
  out_shape[0] = 1;
  auto xd = x.data();
  std::vector<double> out(slab, 0.0);
  for (std::size_t i = 0; i < d0; ++i) {
    for (std::size_t j = 0; j < slab; ++j) out[j] += xd[i * slab + j];
  }
  const double inv = 1.0 / static_cast<double>(d0);
  for (auto& v : out) v *= inv;
  return make_op(std::move(out_shape), std::move(out), "mean_axis0", {x}, [d0, slab, inv](Node& self) {
    auto& gx = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < d0; ++i) {
      for (std::size_t j = 0; j < slab; ++j) gx[i * slab + j] += self.grad[j] * inv;
    }
  });
}

Tensor softmax_lastdim(const Tensor& x) {
  require_rank_at_least(x, 1, "softmax_lastdim");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.numel() / d;
  auto xd = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * d;
    double* y = out.data() + r * d;
    const double mx = *std::max_element(in, in + d);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) z += (y[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < d; ++j) y[j] /= z;
  }
  return make_op(x.shape(), std::move(out), "softmax", {x}, [d, rows](Node& self) {
    auto& gx = parent(self, 0).grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.data.data() + r * d;
      const double* g = self.grad.data() + r * d;
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += y[j] * (g[j] - dot);
    }
  });
}

Tensor log_softmax_lastdim(const Tensor& x) {
  require_rank_at_least(x, 1, "log_softmax_lastdim");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.numel() / d;
  auto xd = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * d;
    const double mx = *std::max_element(in, in + d);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) z += std::exp(in[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = in[j] - lse;
  }
  return make_op(x.shape(), std::move(out), "log_softmax", {x}, [d, rows](Node& self) {
    auto& gx = parent(self, 0).grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.data.data() + r * d;
      const double* g = self.grad.data() + r * d;
      double gsum = 0.0;
      for (std::size_t j = 0; j < d; ++j) gsum += g[j];
      for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += g[j] - std::exp(y[j]) * gsum;
    }
  });
}

Tensor pick_lastdim(const Tensor& x, const std::vector<std::size_t>& index) {
  require_rank_at_least(x, 1, "pick_lastdim");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.numel() / d;
  if (index.size() != rows) {
    throw DimensionError("pick_lastdim: " + std::to_string(index.size()) + " indices for shape " +
                         shape_to_string(x.shape()));
  }
  for (auto i : index) {
    if (i >= d) throw DimensionError("pick_lastdim: index " + std::to_string(i) + " out of range " + std::to_string(d));
  }
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  if (out_shape.empty()) out_shape.push_back(1);
  auto xd = x.data();
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) out[r] = xd[r * d + index[r]];
  return make_op(std::move(out_shape), std::move(out), "pick", {x}, [d, index](Node& self) {
    auto& gx = parent(self, 0).grad_buffer();
    for (std::size_t r = 0; r < index.size(); ++r) gx[r * d + index[r]] += self.grad[r];
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_rank_at_least(x, 1, "layer_norm");
  const std::size_t d = x.shape().back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw DimensionError("layer_norm: gamma/beta must have shape (" + std::to_string(d) + ") for input " +
                         shape_to_string(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  auto xd = x.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += in[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (in[j] - mean) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * gd[j] + bd[j];
    }
  }
  return make_op(x.shape(), std::move(out), "layer_norm", {x, gamma, beta}, [d, rows, xhat, inv_std](Node& self) {
    Node& px = parent(self, 0);
    Node& pg = parent(self, 1);
    Node& pb = parent(self, 2);
    const auto& g = self.grad;
    if (pg.requires_grad) {
      auto& gg = pg.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gg[i % d] += g[i] * (*xhat)[i];
    }
    if (pb.requires_grad) {
      auto& gb = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
    }
    if (px.requires_grad) {
      auto& gx = px.grad_buffer();
      const double inv_d = 1.0 / static_cast<double>(d);
      for (std::size_t r = 0; r < rows; ++r) {
        double mean_dh = 0.0, mean_dh_h = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double dh = g[r * d + j] * pg.data[j];
          mean_dh += dh;
          mean_dh_h += dh * (*xhat)[r * d + j];
        }
        mean_dh *= inv_d;
        mean_dh_h *= inv_d;
        for (std::size_t j = 0; j < d; ++j) {
          const double dh = g[r * d + j] * pg.data[j];
          gx[r * d + j] += (*inv_std)[r] * (dh - mean_dh - (*xhat)[r * d + j] * mean_dh_h);
        }
      }
    }
  });
}

Tensor conv_transpose2x2(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
  if (x.rank() != 4) throw DimensionError("conv_transpose2x2: input must be (B,C,H,W), got " + shape_to_string(x.shape()));
  const std::size_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (kernel.rank() != 4 || kernel.dim(0) != Cin || kernel.dim(2) != 2 || kernel.dim(3) != 2) {
    throw DimensionError("conv_transpose2x2: kernel " + shape_to_string(kernel.shape()) + " incompatible with input " +
                         shape_to_string(x.shape()));
  }
  const std::size_t Cout = kernel.dim(1);
  if (bias.shape() != Shape{Cout}) {
    throw DimensionError("conv_transpose2x2: bias " + shape_to_string(bias.shape()) + " does not match Cout " +
                         std::to_string(Cout));
  }
  const std::size_t OH = 2 * H, OW = 2 * W;
  auto xd = x.data();
  auto kd = kernel.data();
  auto bd = bias.data();
  std::vector<double> out(B * Cout * OH * OW);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t co = 0; co < Cout; ++co) {
      double* o = out.data() + (b * Cout + co) * OH * OW;
      std::fill(o, o + OH * OW, bd[co]);
      for (std::size_t ci = 0; ci < Cin; ++ci) {
        const double* in = xd.data() + (b * Cin + ci) * H * W;
        const double* k = kd.data() + (ci * Cout + co) * 4;
        for (std::size_t i = 0; i < H; ++i) {
          for (std::size_t j = 0; j < W; ++j) {
            const double v = in[i * W + j];
            o[(2 * i) * OW + 2 * j] += v * k[0];
            o[(2 * i) * OW + 2 * j + 1] += v * k[1];
            o[(2 * i + 1) * OW + 2 * j] += v * k[2];
            o[(2 * i + 1) * OW + 2 * j + 1] += v * k[3];
          }
        }
      }
    }
  }
  return make_op({B, Cout, OH, OW}, std::move(out), "conv_transpose2x2", {x, kernel, bias},
                 [B, Cin, Cout, H, W, OH, OW](Node& self) {
                   Node& px = parent(self, 0);
                   Node& pk = parent(self, 1);
                   Node& pb = parent(self, 2);
                   const auto& g = self.grad;
                   double* gx = px.requires_grad ? px.grad_buffer().data() : nullptr;
                   double* gk = pk.requires_grad ? pk.grad_buffer().data() : nullptr;
                   double* gb = pb.requires_grad ? pb.grad_buffer().data() : nullptr;
                   for (std::size_t b = 0; b < B; ++b) {
                     for (std::size_t co = 0; co < Cout; ++co) {
                       const double* go = g.data() + (b * Cout + co) * OH * OW;
                       if (gb) {
                         for (std::size_t i = 0; i < OH * OW; ++i) gb[co] += go[i];
                       }
                       for (std::size_t ci = 0; ci < Cin; ++ci) {
                         const double* in = px.data.data() + (b * Cin + ci) * H * W;
                         const double* k = pk.data.data() + (ci * Cout + co) * 4;
                         for (std::size_t i = 0; i < H; ++i) {
                           for (std::size_t j = 0; j < W; ++j) {
                             const double g0 = go[(2 * i) * OW + 2 * j];
                             const double g1 = go[(2 * i) * OW + 2 * j + 1];
                             const double g2 = go[(2 * i + 1) * OW + 2 * j];
                             const double g3 = go[(2 * i + 1) * OW + 2 * j + 1];
                             if (gx) gx[(b * Cin + ci) * H * W + i * W + j] += g0 * k[0] + g1 * k[1] + g2 * k[2] + g3 * k[3];
                             if (gk) {
                               const double v = in[i * W + j];
                               double* gkk = gk + (ci * Cout + co) * 4;
                               gkk[0] += v * g0;
                               gkk[1] += v * g1;
                               gkk[2] += v * g2;
                               gkk[3] += v * g3;
                             }
                           }
                         }
                       }
                     }
                   }
                 });
}

}  // namespace amsam
