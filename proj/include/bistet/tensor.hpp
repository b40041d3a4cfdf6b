#pragma once

// Reverse-mode autodiff over row-major double tensors.
//
// Gradients are computed into pass-local buffers during backward(); each leaf
// receives exactly one elementwise `grad += pass_total` per backward call.
// Repeated backward calls therefore accumulate additively with a fixed
// summation order, which makes multi-pass gradient accumulation reproduce the
// elementwise sum of per-pass gradients exactly.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "bistet/errors.hpp"

namespace bistet {

using Shape = std::vector<size_t>;

inline size_t shape_size(const Shape& s) {
  size_t n = 1;
  for (size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

namespace detail {

struct TensorImpl;

// gin[i] is null when input i needs no gradient, else a zero-initialized
// buffer of input i's size to be accumulated into.
struct Node {
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(const std::vector<double>& gout, const std::vector<std::vector<double>*>& gin)>
      backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // sized lazily; empty means all-zero
  bool requires_grad = false;
  std::shared_ptr<Node> node;

  bool needs_grad() const { return requires_grad || node != nullptr; }
};

inline thread_local bool grad_enabled = true;

// --- kernels ---

// out += a * b, a: [m x k], b: [k x n]
inline void matmul_acc(const double* a, const double* b, double* out, size_t m, size_t k, size_t n) {
  for (size_t i = 0; i < m; ++i) {
    double* orow = out + i * n;
    const double* arow = a + i * k;
    for (size_t l = 0; l < k; ++l) {
      const double al = arow[l];
      const double* brow = b + l * n;
      for (size_t j = 0; j < n; ++j) orow[j] += al * brow[j];
    }
  }
}

inline void transpose_copy(const double* a, double* out, size_t rows, size_t cols) {
  for (size_t i = 0; i < rows; ++i)
    for (size_t j = 0; j < cols; ++j) out[j * rows + i] = a[i * cols + j];
}

}  // namespace detail

// Disables graph recording in scope; inference uses this to skip node
// bookkeeping entirely.
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev; }
};

class Tensor {
 public:
  Tensor() : impl_(std::make_shared<detail::TensorImpl>()) {}

  static Tensor zeros(Shape shape) {
    Tensor t;
    t.impl_->shape = std::move(shape);
    t.impl_->data.assign(shape_size(t.impl_->shape), 0.0);
    return t;
  }

  static Tensor full(Shape shape, double v) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), v);
    return t;
  }

  static Tensor from(Shape shape, std::vector<double> data) {
    require(shape_size(shape) == data.size(), ErrorKind::Shape,
            "data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    Tensor t;
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(data);
    return t;
  }

  static Tensor scalar(double v) { return from({1}, {v}); }

  static Tensor param(Shape shape, std::vector<double> data) {
    Tensor t = from(std::move(shape), std::move(data));
    t.impl_->requires_grad = true;
    return t;
  }

  const Shape& shape() const { return impl_->shape; }
  size_t rank() const { return impl_->shape.size(); }
  size_t size() const { return impl_->data.size(); }
  const std::vector<double>& data() const { return impl_->data; }
  std::vector<double>& mutable_data() { return impl_->data; }

  double value() const {
    require(size() == 1, ErrorKind::Contract, "value() on non-scalar tensor " + shape_str(shape()));
    return impl_->data[0];
  }

  double at(std::initializer_list<size_t> idx) const {
    require(idx.size() == rank(), ErrorKind::Shape, "index rank mismatch");
    size_t off = 0;
    size_t i = 0;
    for (size_t v : idx) {
      off = off * impl_->shape[i] + v;
      ++i;
    }
    return impl_->data[off];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  bool has_node() const { return impl_->node != nullptr; }
  bool needs_grad() const { return impl_->needs_grad(); }

  const std::vector<double>& grad() const {
    if (impl_->grad.empty()) impl_->grad.assign(size(), 0.0);
    return impl_->grad;
  }

  void zero_grad() { impl_->grad.assign(size(), 0.0); }

  std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

// Extension point used by fused ops (loss, tests): builds a graph tensor from
// explicit inputs and a backward lambda.
inline Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                      std::function<void(const std::vector<double>&, const std::vector<std::vector<double>*>&)>
                          backward) {
  Tensor out = Tensor::from(std::move(shape), std::move(data));
  bool needs = false;
  for (const Tensor& in : inputs) needs = needs || in.needs_grad();
  if (needs && grad_enabled) {
    auto node = std::make_shared<Node>();
    for (const Tensor& in : inputs) node->inputs.push_back(in.impl());
    node->backward = std::move(backward);
    out.impl()->node = node;
  }
  return out;
}

}  // namespace detail

// Fills grad of every reachable leaf parameter with d(loss)/d(leaf), adding to
// whatever is already there.
inline void backward(const Tensor& loss) {
  require(loss.size() == 1, ErrorKind::Contract, "backward requires a scalar loss, got " + shape_str(loss.shape()));
  require(loss.has_node(), ErrorKind::Contract, "backward requires a loss connected to a computation graph");

  using Impl = detail::TensorImpl;

  // Post-order DFS; reverse gives topological order with consumers first.
  std::vector<Impl*> order;
  std::vector<Impl*> leaves;
  std::unordered_set<Impl*> seen;
  std::vector<std::pair<Impl*, size_t>> stack;
  stack.emplace_back(loss.impl().get(), 0);
  seen.insert(loss.impl().get());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    if (impl->node && next < impl->node->inputs.size()) {
      Impl* child = impl->node->inputs[next].get();
      ++next;
      if (child->needs_grad() && seen.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    if (!impl->node && impl->requires_grad) leaves.push_back(impl);
    order.push_back(impl);
    stack.pop_back();
  }

  std::unordered_map<Impl*, std::vector<double>> pass;
  pass[loss.impl().get()] = {1.0};

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* impl = *it;
    if (!impl->node) continue;
    auto found = pass.find(impl);
    if (found == pass.end()) continue;
    std::vector<double> gout = std::move(found->second);
    pass.erase(found);
    std::vector<std::vector<double>*> gin(impl->node->inputs.size(), nullptr);
    for (size_t i = 0; i < impl->node->inputs.size(); ++i) {
      Impl* in = impl->node->inputs[i].get();
      if (!in->needs_grad()) continue;
      auto& buf = pass[in];
      if (buf.empty()) buf.assign(in->data.size(), 0.0);
      gin[i] = &buf;
    }
    impl->node->backward(gout, gin);
  }

  for (Impl* leaf : leaves) {
    auto found = pass.find(leaf);
    if (found == pass.end()) continue;
    if (leaf->grad.empty()) leaf->grad.assign(leaf->data.size(), 0.0);
    const std::vector<double>& g = found->second;
    for (size_t i = 0; i < g.size(); ++i) leaf->grad[i] += g[i];
  }
}

// --- elementwise / broadcast helpers ---

namespace detail {

enum class Bcast { Same, Scalar, Trailing };

inline Bcast broadcast_kind(const Shape& a, const Shape& b, const char* opname) {
  if (a == b) return Bcast::Same;
  if (shape_size(b) == 1) return Bcast::Scalar;
  if (b.size() <= a.size() && std::equal(b.begin(), b.end(), a.end() - b.size())) return Bcast::Trailing;
  raise(ErrorKind::Shape,
        std::string(opname) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
            " (only same-shape, scalar, or trailing-dimension broadcast supported)");
}

// Accumulates gout, reduced over the broadcast repetitions, into gb.
inline void reduce_into(const std::vector<double>& gout, std::vector<double>& gb, Bcast kind, double sign) {
  if (kind == Bcast::Same) {
    for (size_t i = 0; i < gout.size(); ++i) gb[i] += sign * gout[i];
  } else if (kind == Bcast::Scalar) {
    double s = 0.0;
    for (double v : gout) s += v;
    gb[0] += sign * s;
  } else {
    size_t span = gb.size();
    size_t reps = gout.size() / span;
    for (size_t r = 0; r < reps; ++r)
      for (size_t j = 0; j < span; ++j) gb[j] += sign * gout[r * span + j];
  }
}

template <typename Fw, typename Bw>
Tensor binary_elementwise(const Tensor& a, const Tensor& b, const char* opname, Fw&& fw, Bw&& make_backward) {
  Bcast kind = broadcast_kind(a.shape(), b.shape(), opname);
  std::vector<double> out(a.size());
  const auto& ad = a.data();
  const auto& bd = b.data();
  size_t span = kind == Bcast::Same ? a.size() : (kind == Bcast::Scalar ? 1 : b.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = fw(ad[i], bd[kind == Bcast::Scalar ? 0 : i % span]);
  return make_op(a.shape(), std::move(out), {a, b}, make_backward(kind, span));
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      a, b, "add", [](double x, double y) { return x + y; },
      [&](detail::Bcast kind, size_t) {
        return [kind](const std::vector<double>& gout, const std::vector<std::vector<double>*>& gin) {
          if (gin[0])
            for (size_t i = 0; i < gout.size(); ++i) (*gin[0])[i] += gout[i];
          if (gin[1]) detail::reduce_into(gout, *gin[1], kind, 1.0);
        };
      });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      a, b, "sub", [](double x, double y) { return x - y; },
      [&](detail::Bcast kind, size_t) {
        return [kind](const std::vector<double>& gout, const std::vector<std::vector<double>*>& gin) {
          if (gin[0])
            for (size_t i = 0; i < gout.size(); ++i) (*gin[0])[i] += gout[i];
          if (gin[1]) detail::reduce_into(gout, *gin[1], kind, -1.0);
        };
      });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  auto ai = a.impl();
  auto bi = b.impl();
  return detail::binary_elementwise(
      a, b, "mul", [](double x, double y) { return x * y; },
      [&](detail::Bcast kind, size_t span) {
        return [kind, span, ai, bi](const std::vector<double>& gout, const std::vector<std::vector<double>*>& gin) {
          const auto& ad = ai->data;
          const auto& bd = bi->data;
          if (gin[0])
            for (size_t i = 0; i < gout.size(); ++i)
              (*gin[0])[i] += gout[i] * bd[kind == detail::Bcast::Scalar ? 0 : i % span];
          if (gin[1]) {
            if (kind == detail::Bcast::Same) {
              for (size_t i = 0; i < gout.size(); ++i) (*gin[1])[i] += gout[i] * ad[i];
            } else if (kind == detail::Bcast::Scalar) {
              double s = 0.0;
              for (size_t i = 0; i < gout.size(); ++i) s += gout[i] * ad[i];
              (*gin[1])[0] += s;
            } else {
              size_t reps = gout.size() / span;
              for (size_t r = 0; r < reps; ++r)
                for (size_t j = 0; j < span; ++j) (*gin[1])[j] += gout[r * span + j] * ad[r * span + j];
            }
          }
        };
      });
}

inline Tensor divide(const Tensor& a, const Tensor& b) {
  auto ai = a.impl();
  auto bi = b.impl();
  return detail::binary_elementwise(
      a, b, "divide", [](double x, double y) { return x / y; },
      [&](detail::Bcast kind, size_t span) {
        return [kind, span, ai, bi](const std::vector<double>& gout, const std::vector<std::vector<double>*>& gin) {
          const auto& ad = ai->data;
          const auto& bd = bi->data;
          auto bval = [&](size_t i) { return bd[kind == detail::Bcast::Scalar ? 0 : i % span]; };
          if (gin[0])
            for (size_t i = 0; i < gout.size(); ++i) (*gin[0])[i] += gout[i] / bval(i);
          if (gin[1]) {
            if (kind == detail::Bcast::Same) {
              for (size_t i = 0; i < gout.size(); ++i) (*gin[1])[i] -= gout[i] * ad[i] / (bd[i] * bd[i]);
            } else {
              for (size_t i = 0; i < gout.size(); ++i) {
                size_t j = kind == detail::Bcast::Scalar ? 0 : i % span;
                (*gin[1])[j] -= gout[i] * ad[i] / (bd[j] * bd[j]);
              }
            }
          }
        };
      });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.data());
  for (double& v : out) v += c;
  return detail::make_op(a.shape(), std::move(out), {a},
                         [](const std::vector<double>& gout, const std::vector<std::vector<double>*>& gin) {
                           if (gin[0])
                             for (size_t i = 0; i < gout.size(); ++i) (*gin[0])[i] += gout[i];
                         });
}

inline Tensor mul_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.data());
  for (double& v : out) v *= c;
  return detail::make_op(a.shape(), std::move(out), {a},
                         [c](const std::vector<double>& gout, const std::vector<std::vector<double>*>& gin) {
                           if (gin[0])
                             for (size_t i = 0; i < gout.size(); ++i) (*gin[0])[i] += c * gout[i];
                         });
}

inline Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.data());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  auto ai = a.impl();
  return detail::make_op(a.shape(), std::move(out), {a},
                         [ai](const std::vector<double>& gout, const std::vector<std::vector<double>*>& gin) {
                           if (!gin[0]) return;
                           const auto& x = ai->data;
                           for (size_t i = 0; i < gout.size(); ++i)
                             if (x[i] > 0.0) (*gin[0])[i] += gout[i];
                         });
}

inline Tensor exp_op(const Tensor& a) {
  std::vector<double> out(a.data());
  for (double& v : out) v = std::exp(v);
  std::vector<double> y = out;
  return detail::make_op(a.shape(), std::move(out), {a},
                         [y = std::move(y)](const std::vector<double>& gout, const std::vector<std::vector<double>*>& gin) {
                           if (!gin[0]) return;
                           for (size_t i = 0; i < gout.size(); ++i) (*gin[0])[i] += gout[i] * y[i];
                         });
}

inline Tensor log_op(const Tensor& a) {
  std::vector<double> out(a.data());
  for (double& v : out) v = std::log(v);
  auto ai = a.impl();
  return detail::make_op(a.shape(), std::move(out), {a},
                         [ai](const std::vector<double>& gout, const std::vector<std::vector<double>*>& gin) {
                           if (!gin[0]) return;
                           const auto& x = ai->data;
                           for (size_t i = 0; i < gout.size(); ++i) (*gin[0])[i] += gout[i] / x[i];
                         });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2, ErrorKind::Shape,
          "matmul requires rank-2 tensors, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  size_t m = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], n = b.shape()[1];
  require(k == k2, ErrorKind::Shape,
          "matmul inner dimension mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<double> out(m * n, 0.0);
  detail::matmul_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  auto ai = a.impl();
  auto bi = b.impl();
  return detail::make_op(
      {m, n}, std::move(out), {a, b},
      [ai, bi, m, k, n](const std::vector<double>& gout, const std::vector<std::vector<double>*>& gin) {
        if (gin[0]) {  // dA += G * B^T
          std::vector<double> bt(k * n);
          detail::transpose_copy(bi->data.data(), bt.data(), k, n);
          detail::matmul_acc(gout.data(), bt.data(), gin[0]->data(), m, n, k);
        }
        if (gin[1]) {  // dB += A^T * G
          std::vector<double> at(m * k);
          detail::transpose_copy(ai->data.data(), at.data(), m, k);
          detail::matmul_acc(at.data(), gout.data(), gin[1]->data(), k, m, n);
        }
      });
}

inline Tensor softmax(const Tensor& a, size_t axis) {
  require(axis < a.rank(), ErrorKind::Shape,
          "softmax axis " + std::to_string(axis) + " out of range for " + shape_str(a.shape()));
  for (double v : a.data())
    require(std::isfinite(v), ErrorKind::Numeric, "softmax input contains a non-finite value");
  size_t n = a.shape()[axis];
  size_t inner = 1;
  for (size_t i = axis + 1; i < a.rank(); ++i) inner *= a.shape()[i];
  size_t outer = a.size() / (n * inner);
  std::vector<double> out(a.size());
  const auto& x = a.data();
  for (size_t o = 0; o < outer; ++o) {
    for (size_t i = 0; i < inner; ++i) {
      size_t base = o * n * inner + i;
      double mx = x[base];
      for (size_t t = 1; t < n; ++t) mx = std::max(mx, x[base + t * inner]);
      double sum = 0.0;
      for (size_t t = 0; t < n; ++t) {
        double e = std::exp(x[base + t * inner] - mx);
        out[base + t * inner] = e;
        sum += e;
      }
      for (size_t t = 0; t < n; ++t) out[base + t * inner] /= sum;
    }
  }
  std::vector<double> y = out;
  return detail::make_op(
      a.shape(), std::move(out), {a},
      [y = std::move(y), n, inner, outer](const std::vector<double>& gout, const std::vector<std::vector<double>*>& gin) {
        if (!gin[0]) return;
        for (size_t o = 0; o < outer; ++o) {
          for (size_t i = 0; i < inner; ++i) {
            size_t base = o * n * inner + i;
            double dot = 0.0;
            for (size_t t = 0; t < n; ++t) dot += gout[base + t * inner] * y[base + t * inner];
            for (size_t t = 0; t < n; ++t)
              (*gin[0])[base + t * inner] += y[base + t * inner] * (gout[base + t * inner] - dot);
          }
        }
      });
}

// Row-wise log-softmax of a rank-2 tensor.
inline Tensor log_softmax_rows(const Tensor& a) {
  require(a.rank() == 2, ErrorKind::Shape, "log_softmax_rows requires rank-2, got " + shape_str(a.shape()));
  size_t rows = a.shape()[0], cols = a.shape()[1];
  std::vector<double> out(a.size());
  const auto& x = a.data();
  for (size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * cols;
    double mx = xr[0];
    for (size_t j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
    double sum = 0.0;
    for (size_t j = 0; j < cols; ++j) sum += std::exp(xr[j] - mx);
    double lse = mx + std::log(sum);
    for (size_t j = 0; j < cols; ++j) out[r * cols + j] = xr[j] - lse;
  }
  std::vector<double> y = out;
  return detail::make_op(
      a.shape(), std::move(out), {a},
      [y = std::move(y), rows, cols](const std::vector<double>& gout, const std::vector<std::vector<double>*>& gin) {
        if (!gin[0]) return;
        for (size_t r = 0; r < rows; ++r) {
          double gsum = 0.0;
          for (size_t j = 0; j < cols; ++j) gsum += gout[r * cols + j];
          for (size_t j = 0; j < cols; ++j)
            (*gin[0])[r * cols + j] += gout[r * cols + j] - std::exp(y[r * cols + j]) * gsum;
        }
      });
}

inline Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return detail::make_op({1}, {s}, {a},
                         [](const std::vector<double>& gout, const std::vector<std::vector<double>*>& gin) {
                           if (!gin[0]) return;
                           for (double& v : *gin[0]) v += gout[0];
                         });
}

inline Tensor mean_axis(const Tensor& a, size_t axis) {
  require(axis < a.rank(), ErrorKind::Shape,
          "mean_axis axis " + std::to_string(axis) + " out of range for " + shape_str(a.shape()));
  size_t n = a.shape()[axis];
  size_t inner = 1;
  for (size_t i = axis + 1; i < a.rank(); ++i) inner *= a.shape()[i];
  size_t outer = a.size() / (n * inner);
  Shape oshape;
  for (size_t i = 0; i < a.rank(); ++i)
    if (i != axis) oshape.push_back(a.shape()[i]);
  if (oshape.empty()) oshape.push_back(1);
  std::vector<double> out(outer * inner, 0.0);
  const auto& x = a.data();
  for (size_t o = 0; o < outer; ++o)
    for (size_t t = 0; t < n; ++t)
      for (size_t i = 0; i < inner; ++i) out[o * inner + i] += x[(o * n + t) * inner + i];
  for (double& v : out) v /= static_cast<double>(n);
  return detail::make_op(
      oshape, std::move(out), {a},
      [n, inner, outer](const std::vector<double>& gout, const std::vector<std::vector<double>*>& gin) {
        if (!gin[0]) return;
        double inv = 1.0 / static_cast<double>(n);
        for (size_t o = 0; o < outer; ++o)
          for (size_t t = 0; t < n; ++t)
            for (size_t i = 0; i < inner; ++i) (*gin[0])[(o * n + t) * inner + i] += gout[o * inner + i] * inv;
      });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  require(shape_size(shape) == a.size(), ErrorKind::Shape,
          "reshape from " + shape_str(a.shape()) + " to " + shape_str(shape) + " changes element count");
  std::vector<double> out(a.data());
  return detail::make_op(std::move(shape), std::move(out), {a},
                         [](const std::vector<double>& gout, const std::vector<std::vector<double>*>& gin) {
                           if (!gin[0]) return;
                           for (size_t i = 0; i < gout.size(); ++i) (*gin[0])[i] += gout[i];
                         });
}

inline Tensor transpose(const Tensor& a) {
  require(a.rank() == 2, ErrorKind::Shape, "transpose requires rank-2, got " + shape_str(a.shape()));
  size_t rows = a.shape()[0], cols = a.shape()[1];
  std::vector<double> out(a.size());
  detail::transpose_copy(a.data().data(), out.data(), rows, cols);
  return detail::make_op({cols, rows}, std::move(out), {a},
                         [rows, cols](const std::vector<double>& gout, const std::vector<std::vector<double>*>& gin) {
                           if (!gin[0]) return;
                           for (size_t i = 0; i < cols; ++i)
                             for (size_t j = 0; j < rows; ++j) (*gin[0])[j * cols + i] += gout[i * rows + j];
                         });
}

// Concatenates rank-2 tensors with equal row counts along columns.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  require(!parts.empty(), ErrorKind::Contract, "concat_cols of zero tensors");
  size_t rows = parts[0].shape()[0];
  size_t total = 0;
  for (const Tensor& p : parts) {
    require(p.rank() == 2 && p.shape()[0] == rows, ErrorKind::Shape,
            "concat_cols parts must be rank-2 with equal rows");
    total += p.shape()[1];
  }
  std::vector<double> out(rows * total);
  size_t off = 0;
  std::vector<size_t> widths;
  for (const Tensor& p : parts) {
    size_t w = p.shape()[1];
    widths.push_back(w);
    for (size_t r = 0; r < rows; ++r)
      std::copy_n(p.data().data() + r * w, w, out.data() + r * total + off);
    off += w;
  }
  return detail::make_op(
      {rows, total}, std::move(out), parts,
      [rows, total, widths](const std::vector<double>& gout, const std::vector<std::vector<double>*>& gin) {
        size_t off = 0;
        for (size_t p = 0; p < widths.size(); ++p) {
          if (gin[p])
            for (size_t r = 0; r < rows; ++r)
              for (size_t c = 0; c < widths[p]; ++c) (*gin[p])[r * widths[p] + c] += gout[r * total + off + c];
          off += widths[p];
        }
      });
}

// out[r, :] = table[ids[r], :]; backward scatter-adds rows in ascending r.
inline Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  require(table.rank() == 2, ErrorKind::Shape, "gather_rows requires rank-2 table");
  size_t v = table.shape()[0], d = table.shape()[1];
  for (int id : ids)
    require(id >= 0 && static_cast<size_t>(id) < v, ErrorKind::Codec,
            "gather_rows: row id " + std::to_string(id) + " outside table of " + std::to_string(v) + " rows");
  std::vector<double> out(ids.size() * d);
  for (size_t r = 0; r < ids.size(); ++r)
    std::copy_n(table.data().data() + static_cast<size_t>(ids[r]) * d, d, out.data() + r * d);
  return detail::make_op({ids.size(), d}, std::move(out), {table},
                         [ids, d](const std::vector<double>& gout, const std::vector<std::vector<double>*>& gin) {
                           if (!gin[0]) return;
                           for (size_t r = 0; r < ids.size(); ++r)
                             for (size_t j = 0; j < d; ++j)
                               (*gin[0])[static_cast<size_t>(ids[r]) * d + j] += gout[r * d + j];
                         });
}

// 2-D convolution: x [Ci x H x W], w [Co x Ci x kh x kw], bias [Co].
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, size_t sh, size_t sw, size_t pad) {
  require(x.rank() == 3 && w.rank() == 4, ErrorKind::Shape,
          "conv2d expects x [C x H x W] and w [Co x Ci x kh x kw], got " + shape_str(x.shape()) + " and " +
              shape_str(w.shape()));
  size_t ci = x.shape()[0], h = x.shape()[1], wd = x.shape()[2];
  size_t co = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
  require(w.shape()[1] == ci, ErrorKind::Shape, "conv2d channel mismatch");
  require(bias.rank() == 1 && bias.shape()[0] == co, ErrorKind::Shape, "conv2d bias shape mismatch");
  require(h + 2 * pad >= kh && wd + 2 * pad >= kw, ErrorKind::Shape, "conv2d kernel larger than padded input");
  size_t ho = (h + 2 * pad - kh) / sh + 1;
  size_t wo = (wd + 2 * pad - kw) / sw + 1;

  std::vector<double> out(co * ho * wo);
  const double* xd = x.data().data();
  const double* wdp = w.data().data();
  const double* bd = bias.data().data();
  for (size_t c = 0; c < co; ++c) {
    double* oplane = out.data() + c * ho * wo;
    std::fill_n(oplane, ho * wo, bd[c]);
    for (size_t ic = 0; ic < ci; ++ic) {
      const double* iplane = xd + ic * h * wd;
      const double* kbase = wdp + (c * ci + ic) * kh * kw;
      for (size_t ky = 0; ky < kh; ++ky) {
        for (size_t kx = 0; kx < kw; ++kx) {
          const double kv = kbase[ky * kw + kx];
          for (size_t oy = 0; oy < ho; ++oy) {
            ptrdiff_t iy = static_cast<ptrdiff_t>(oy * sh + ky) - static_cast<ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<ptrdiff_t>(h)) continue;
            const double* irow = iplane + iy * wd;
            double* orow = oplane + oy * wo;
            if (sw == 1) {
              ptrdiff_t shift = static_cast<ptrdiff_t>(kx) - static_cast<ptrdiff_t>(pad);
              ptrdiff_t lo = shift < 0 ? -shift : 0;
              ptrdiff_t hi = std::min<ptrdiff_t>(wo, static_cast<ptrdiff_t>(wd) - shift);
              for (ptrdiff_t ox = lo; ox < hi; ++ox) orow[ox] += kv * irow[ox + shift];
            } else {
              for (size_t ox = 0; ox < wo; ++ox) {
                ptrdiff_t ix = static_cast<ptrdiff_t>(ox * sw + kx) - static_cast<ptrdiff_t>(pad);
                if (ix >= 0 && ix < static_cast<ptrdiff_t>(wd)) orow[ox] += kv * irow[ix];
              }
            }
          }
        }
      }
    }
  }

  auto xi = x.impl();
  auto wi = w.impl();
  return detail::make_op(
      {co, ho, wo}, std::move(out), {x, w, bias},
      [xi, wi, ci, h, wd, co, kh, kw, sh, sw, pad, ho, wo](const std::vector<double>& gout,
                                                           const std::vector<std::vector<double>*>& gin) {
        const double* xd = xi->data.data();
        const double* wdp = wi->data.data();
        if (gin[2]) {
          for (size_t c = 0; c < co; ++c) {
            double s = 0.0;
            const double* gplane = gout.data() + c * ho * wo;
            for (size_t i = 0; i < ho * wo; ++i) s += gplane[i];
            (*gin[2])[c] += s;
          }
        }
        for (size_t c = 0; c < co; ++c) {
          const double* gplane = gout.data() + c * ho * wo;
          for (size_t ic = 0; ic < ci; ++ic) {
            const double* iplane = xd + ic * h * wd;
            const double* kbase = wdp + (c * ci + ic) * kh * kw;
            double* dkbase = gin[1] ? gin[1]->data() + (c * ci + ic) * kh * kw : nullptr;
            double* diplane = gin[0] ? gin[0]->data() + ic * h * wd : nullptr;
            for (size_t ky = 0; ky < kh; ++ky) {
              for (size_t kx = 0; kx < kw; ++kx) {
                const double kv = kbase[ky * kw + kx];
                double dk = 0.0;
                for (size_t oy = 0; oy < ho; ++oy) {
                  ptrdiff_t iy = static_cast<ptrdiff_t>(oy * sh + ky) - static_cast<ptrdiff_t>(pad);
                  if (iy < 0 || iy >= static_cast<ptrdiff_t>(h)) continue;
                  const double* irow = iplane + iy * wd;
                  double* dirow = diplane ? diplane + iy * wd : nullptr;
                  const double* grow = gplane + oy * wo;
                  if (sw == 1) {
                    ptrdiff_t shift = static_cast<ptrdiff_t>(kx) - static_cast<ptrdiff_t>(pad);
                    ptrdiff_t lo = shift < 0 ? -shift : 0;
                    ptrdiff_t hi = std::min<ptrdiff_t>(wo, static_cast<ptrdiff_t>(wd) - shift);
                    if (dkbase)
                      for (ptrdiff_t ox = lo; ox < hi; ++ox) dk += grow[ox] * irow[ox + shift];
                    if (dirow)
                      for (ptrdiff_t ox = lo; ox < hi; ++ox) dirow[ox + shift] += kv * grow[ox];
                  } else {
                    for (size_t ox = 0; ox < wo; ++ox) {
                      ptrdiff_t ix = static_cast<ptrdiff_t>(ox * sw + kx) - static_cast<ptrdiff_t>(pad);
                      if (ix < 0 || ix >= static_cast<ptrdiff_t>(wd)) continue;
                      if (dkbase) dk += grow[ox] * irow[ix];
                      if (dirow) dirow[ix] += kv * grow[ox];
                    }
                  }
                }
                if (dkbase) dkbase[ky * kw + kx] += dk;
              }
            }
          }
        }
      });
}

// Row-wise layer normalization with population variance.
inline Tensor layer_norm_rows(const Tensor& x, const Tensor& scale, const Tensor& shift, double eps) {
  require(x.rank() == 2, ErrorKind::Shape, "layer_norm_rows requires rank-2 input");
  size_t rows = x.shape()[0], d = x.shape()[1];
  require(d >= 2, ErrorKind::Shape, "layer_norm_rows requires row width >= 2");
  require(scale.rank() == 1 && scale.shape()[0] == d && shift.rank() == 1 && shift.shape()[0] == d,
          ErrorKind::Shape, "layer_norm_rows scale/shift must be length-d vectors");
  std::vector<double> out(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> istd(rows);
  const auto& xd = x.data();
  const auto& sc = scale.data();
  const auto& sh = shift.data();
  for (size_t r = 0; r < rows; ++r) {
    const double* xr = xd.data() + r * d;
    double mean = 0.0;
    for (size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (size_t j = 0; j < d; ++j) {
      double c = xr[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    double is = 1.0 / std::sqrt(var + eps);
    istd[r] = is;
    for (size_t j = 0; j < d; ++j) {
      double h = (xr[j] - mean) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = h * sc[j] + sh[j];
    }
  }
  auto si = scale.impl();
  return detail::make_op(
      x.shape(), std::move(out), {x, scale, shift},
      [si, xhat = std::move(xhat), istd = std::move(istd), rows, d](const std::vector<double>& gout,
                                                                    const std::vector<std::vector<double>*>& gin) {
        const auto& sc = si->data;
        for (size_t r = 0; r < rows; ++r) {
          const double* g = gout.data() + r * d;
          const double* xh = xhat.data() + r * d;
          if (gin[2])
            for (size_t j = 0; j < d; ++j) (*gin[2])[j] += g[j];
          if (gin[1])
            for (size_t j = 0; j < d; ++j) (*gin[1])[j] += g[j] * xh[j];
          if (gin[0]) {
            double m1 = 0.0, m2 = 0.0;
            for (size_t j = 0; j < d; ++j) {
              double gh = g[j] * sc[j];
              m1 += gh;
              m2 += gh * xh[j];
            }
            m1 /= static_cast<double>(d);
            m2 /= static_cast<double>(d);
            for (size_t j = 0; j < d; ++j) {
              double gh = g[j] * sc[j];
              (*gin[0])[r * d + j] += (gh - m1 - xh[j] * m2) * istd[r];
            }
          }
        }
      });
}

// Max over components of |analytic - central difference| / max(|a|, |n|, 1e-12).
inline double gradient_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  require(eps >= 1e-7 && eps <= 1e-3, ErrorKind::Contract, "gradient_check eps outside [1e-7, 1e-3]");
  Tensor var = Tensor::param(x.shape(), x.data());
  Tensor loss = f(var);
  require(loss.size() == 1, ErrorKind::Contract, "gradient_check requires a scalar-valued function");
  backward(loss);
  std::vector<double> analytic = var.grad();

  std::vector<double> point = x.data();
  double max_err = 0.0;
  for (size_t i = 0; i < point.size(); ++i) {
    double keep = point[i];
    point[i] = keep + eps;
    double up = f(Tensor::from(x.shape(), point)).value();
    point[i] = keep - eps;
    double dn = f(Tensor::from(x.shape(), point)).value();
    point[i] = keep;
    double numeric = (up - dn) / (2.0 * eps);
    double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric), 1e-12});
    max_err = std::max(max_err, std::fabs(analytic[i] - numeric) / denom);
  }
  return max_err;
}

}  // namespace bistet
