#include "tamformer/numerics.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "tamformer/errors.hpp"

namespace tamformer {

namespace detail {

struct Node {
  std::uint64_t id = 0;
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

std::atomic<std::uint64_t> g_next_id{1};

NodePtr make_leaf(Shape shape, std::vector<double> values, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return node;
}

// Creates an op result. Inputs and the backward closure are retained only if
// some input needs a gradient.
Tensor make_result(Shape shape, std::vector<double> values,
                   std::vector<NodePtr> inputs,
                   std::function<void(Node&)> backward_fn) {
  bool needs = std::any_of(inputs.begin(), inputs.end(),
                           [](const NodePtr& n) { return n->requires_grad; });
  auto node = make_leaf(std::move(shape), std::move(values), needs);
  if (needs) {
    node->inputs = std::move(inputs);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(node);
}

void require_2d(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a 2-D tensor, got " +
                         shape_str(t.shape()));
  }
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

// --- Tensor -------------------------------------------------------------

Tensor::Tensor() = default;
Tensor::Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_str(shape));
  }
  std::size_t n = shape_numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  }
  return Tensor(make_leaf(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

Tensor Tensor::matrix(const std::vector<std::vector<double>>& rows, bool requires_grad) {
  if (rows.empty() || rows.front().empty()) throw DimensionError("matrix: empty input");
  std::vector<double> flat;
  for (const auto& r : rows) {
    if (r.size() != rows.front().size()) throw DimensionError("matrix: ragged rows");
    flat.insert(flat.end(), r.begin(), r.end());
  }
  return from({rows.size(), rows.front().size()}, std::move(flat), requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::numel() const { return node_->value.size(); }
std::size_t Tensor::rows() const { return node_->shape.front(); }
std::size_t Tensor::cols() const { return node_->shape.back(); }
std::span<const double> Tensor::values() const { return node_->value; }
std::span<double> Tensor::mutable_values() { return node_->value; }

double Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
  }
  return node_->value[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  return node_->value[r * cols() + c];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
bool Tensor::has_grad() const { return !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_->grad; }
void Tensor::zero_grad() { node_->grad.clear(); }
std::uint64_t Tensor::id() const { return node_->id; }

Tensor Tensor::detach() const { return clone(false); }

Tensor Tensor::clone(bool requires_grad) const {
  return Tensor(make_leaf(node_->shape, node_->value, requires_grad));
}

void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{loss.node().get()};
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    order.push_back(n);
    for (const auto& in : n->inputs) {
      if (in->requires_grad) stack.push_back(in.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const Node* a, const Node* b) { return a->id > b->id; });

  loss.node()->grad_buffer()[0] += 1.0;
  for (Node* n : order) {
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  // Intermediate gradients are not needed after the sweep.
  for (Node* n : order) {
    if (n->backward_fn) n->grad.clear();
  }
}

// --- operations ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
  }
  std::vector<double> out(n * m, 0.0);
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = &bv[p * m];
      double* orow = &out[i * m];
      for (std::size_t j = 0; j < m; ++j) orow[j] += aip * brow[j];
    }
  }
  return make_result({n, m}, std::move(out), {a.node(), b.node()}, [n, k, m](Node& self) {
    const auto& g = self.grad;
    Node& an = *self.inputs[0];
    Node& bn = *self.inputs[1];
    if (an.requires_grad) {
      auto& ga = an.grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < m; ++j) s += g[i * m + j] * bn.value[p * m + j];
          ga[i * k + p] += s;
        }
    }
    if (bn.requires_grad) {
      auto& gb = bn.grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = an.value[i * k + p];
          for (std::size_t j = 0; j < m; ++j) gb[p * m + j] += aip * g[i * m + j];
        }
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_2d(a, "transpose");
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<double> out(n * m);
  auto av = a.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j * n + i] = av[i * m + j];
  return make_result({m, n}, std::move(out), {a.node()}, [n, m](Node& self) {
    auto& ga = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) ga[i * m + j] += self.grad[j * n + i];
  });
}

namespace {

// Row broadcast applies when b has exactly as many entries as a's last axis.
bool is_row_broadcast(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return false;
  if (a.rank() < 1) return false;
  const std::size_t m = a.cols();
  if (b.numel() != m) return false;
  return b.rank() == 1 || (b.rank() == 2 && b.rows() == 1);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return make_result(a.shape(), std::move(out), {a.node(), b.node()}, [](Node& self) {
      for (int s = 0; s < 2; ++s) {
        Node& in = *self.inputs[s];
        if (!in.requires_grad) continue;
        auto& g = in.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
    });
  }
  if (!is_row_broadcast(a, b)) {
    throw DimensionError("add: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.cols();
  const std::size_t n = a.numel() / m;
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = a[i * m + j] + b[j];
  return make_result(a.shape(), std::move(out), {a.node(), b.node()}, [n, m](Node& self) {
    Node& an = *self.inputs[0];
    Node& bn = *self.inputs[1];
    if (an.requires_grad) {
      auto& g = an.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (bn.requires_grad) {
      auto& g = bn.grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) g[j] += self.grad[i * m + j];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("sub: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result(a.shape(), std::move(out), {a.node(), b.node()}, [](Node& self) {
    Node& an = *self.inputs[0];
    Node& bn = *self.inputs[1];
    if (an.requires_grad) {
      auto& g = an.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (bn.requires_grad) {
      auto& g = bn.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return make_result(a.shape(), std::move(out), {a.node(), b.node()}, [](Node& self) {
      Node& an = *self.inputs[0];
      Node& bn = *self.inputs[1];
      if (an.requires_grad) {
        auto& g = an.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn.value[i];
      }
      if (bn.requires_grad) {
        auto& g = bn.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an.value[i];
      }
    });
  }
  if (!is_row_broadcast(a, b)) {
    throw DimensionError("mul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.cols();
  const std::size_t n = a.numel() / m;
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = a[i * m + j] * b[j];
  return make_result(a.shape(), std::move(out), {a.node(), b.node()}, [n, m](Node& self) {
    Node& an = *self.inputs[0];
    Node& bn = *self.inputs[1];
    if (an.requires_grad) {
      auto& g = an.grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) g[i * m + j] += self.grad[i * m + j] * bn.value[j];
    }
    if (bn.requires_grad) {
      auto& g = bn.grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) g[j] += self.grad[i * m + j] * an.value[i * m + j];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return make_result(a.shape(), std::move(out), {a.node()}, [s](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
  });
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
  return make_result(a.shape(), std::move(out), {a.node()}, [](Node& self) {
    Node& in = *self.inputs[0];
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (in.value[i] > 0.0) g[i] += self.grad[i];
  });
}

Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a[i];
    // Split by sign so exp never overflows.
    if (x >= 0.0) {
      out[i] = 1.0 / (1.0 + std::exp(-x));
    } else {
      const double e = std::exp(x);
      out[i] = e / (1.0 + e);
    }
  }
  return make_result(a.shape(), std::move(out), {a.node()}, [](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = self.value[i];
      g[i] += self.grad[i] * s * (1.0 - s);
    }
  });
}

Tensor softmax_rows(const Tensor& x) {
  require_2d(x, "softmax_rows");
  const std::size_t n = x.rows(), m = x.cols();
  std::vector<double> out(n * m);
  auto xv = x.values();
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = &xv[i * m];
    const double mx = *std::max_element(row, row + m);
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      out[i * m + j] = std::exp(row[j] - mx);
      z += out[i * m + j];
    }
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] /= z;
  }
  return make_result({n, m}, std::move(out), {x.node()}, [n, m](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < m; ++j) dot += self.grad[i * m + j] * self.value[i * m + j];
      for (std::size_t j = 0; j < m; ++j)
        g[i * m + j] += self.value[i * m + j] * (self.grad[i * m + j] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t d = x.cols();
  if (d < 2) throw DimensionError("layer_norm: last axis must be >= 2, got " + shape_str(x.shape()));
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " do not match " + shape_str(x.shape()));
  }
  if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
  const std::size_t n = x.numel() / d;
  std::vector<double> out(x.numel());
  // xhat and 1/sigma per row, kept for the backward pass.
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(n);
  auto xv = x.values();
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xv[i * d + j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = xv[i * d + j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xv[i * d + j] - mu) * is;
      (*xhat)[i * d + j] = h;
      out[i * d + j] = h * gain[j] + bias[j];
    }
  }
  return make_result(
      x.shape(), std::move(out), {x.node(), gain.node(), bias.node()},
      [n, d, xhat, inv_std](Node& self) {
        Node& xn = *self.inputs[0];
        Node& gn = *self.inputs[1];
        Node& bn = *self.inputs[2];
        const auto& g = self.grad;
        if (gn.requires_grad) {
          auto& gg = gn.grad_buffer();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) gg[j] += g[i * d + j] * (*xhat)[i * d + j];
        }
        if (bn.requires_grad) {
          auto& gb = bn.grad_buffer();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
        }
        if (xn.requires_grad) {
          auto& gx = xn.grad_buffer();
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t i = 0; i < n; ++i) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = g[i * d + j] * gn.value[j];
              s1 += dh;
              s2 += dh * (*xhat)[i * d + j];
            }
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = g[i * d + j] * gn.value[j];
              gx[i * d + j] +=
                  (*inv_std)[i] * (dh - s1 * inv_d - (*xhat)[i * d + j] * s2 * inv_d);
            }
          }
        }
      });
}

Tensor concat_last_axis(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_last_axis: no inputs");
  Shape lead(parts.front().shape().begin(), parts.front().shape().end() - 1);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  std::vector<NodePtr> inputs;
  for (const auto& p : parts) {
    Shape pl(p.shape().begin(), p.shape().end() - 1);
    if (pl != lead) {
      throw DimensionError("concat_last_axis: leading shapes differ, " +
                           shape_str(parts.front().shape()) + " vs " + shape_str(p.shape()));
    }
    widths.push_back(p.cols());
    total += p.cols();
    inputs.push_back(p.node());
  }
  const std::size_t n = shape_numel(lead);
  std::vector<double> out(n * total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t w = widths[k];
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * total + off + j] = parts[k][i * w + j];
    off += w;
  }
  Shape shape = lead;
  shape.push_back(total);
  return make_result(std::move(shape), std::move(out), std::move(inputs),
                     [n, total, widths](Node& self) {
                       std::size_t off = 0;
                       for (std::size_t k = 0; k < widths.size(); ++k) {
                         const std::size_t w = widths[k];
                         Node& in = *self.inputs[k];
                         if (in.requires_grad) {
                           auto& g = in.grad_buffer();
                           for (std::size_t i = 0; i < n; ++i)
                             for (std::size_t j = 0; j < w; ++j)
                               g[i * w + j] += self.grad[i * total + off + j];
                         }
                         off += w;
                       }
                     });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  require_2d(x, "slice_cols");
  if (begin >= end || end > x.cols()) {
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") invalid for " + shape_str(x.shape()));
  }
  const std::size_t n = x.rows(), m = x.cols(), w = end - begin;
  std::vector<double> out(n * w);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = x[i * m + begin + j];
  return make_result({n, w}, std::move(out), {x.node()}, [n, m, w, begin](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) g[i * m + begin + j] += self.grad[i * w + j];
  });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  require_2d(x, "slice_rows");
  if (begin >= end || end > x.rows()) {
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") invalid for " + shape_str(x.shape()));
  }
  const std::size_t m = x.cols();
  auto xv = x.values();
  std::vector<double> out(xv.begin() + begin * m, xv.begin() + end * m);
  return make_result({end - begin, m}, std::move(out), {x.node()}, [m, begin](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * m + i] += self.grad[i];
  });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  require_2d(x, "gather_rows");
  if (rows.empty()) throw DimensionError("gather_rows: empty index list");
  const std::size_t m = x.cols();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  std::vector<double> out(idx.size() * m);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= x.rows()) {
      throw DimensionError("gather_rows: row " + std::to_string(idx[r]) + " out of range for " +
                           shape_str(x.shape()));
    }
    for (std::size_t j = 0; j < m; ++j) out[r * m + j] = x[idx[r] * m + j];
  }
  return make_result({idx.size(), m}, std::move(out), {x.node()}, [m, idx](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < m; ++j) g[idx[r] * m + j] += self.grad[r * m + j];
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return make_result({1}, {s}, {x.node()}, [](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  const double inv = 1.0 / static_cast<double>(x.numel());
  return make_result({1}, {s * inv}, {x.node()}, [inv](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (auto& v : g) v += self.grad[0] * inv;
  });
}

Tensor sum_sq(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v * v;
  return make_result({1}, {s}, {x.node()}, [](Node& self) {
    Node& in = *self.inputs[0];
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * in.value[i] * self.grad[0];
  });
}

Tensor stop_gradient(const Tensor& x) { return x.detach(); }

Tensor pair_sum(const Tensor& a, const Tensor& b, std::span<const RowPair> pairs) {
  require_2d(a, "pair_sum");
  require_2d(b, "pair_sum");
  if (a.cols() != b.cols()) {
    throw DimensionError("pair_sum: widths differ, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  if (pairs.empty()) throw DimensionError("pair_sum: no pairs");
  const std::size_t h = a.cols();
  std::vector<RowPair> ps(pairs.begin(), pairs.end());
  std::vector<double> out(ps.size() * h);
  for (std::size_t p = 0; p < ps.size(); ++p) {
    if (ps[p].target >= a.rows() || ps[p].source >= b.rows()) {
      throw DimensionError("pair_sum: pair index out of range");
    }
    for (std::size_t j = 0; j < h; ++j)
      out[p * h + j] = a[ps[p].target * h + j] + b[ps[p].source * h + j];
  }
  return make_result({ps.size(), h}, std::move(out), {a.node(), b.node()}, [h, ps](Node& self) {
    Node& an = *self.inputs[0];
    Node& bn = *self.inputs[1];
    if (an.requires_grad) {
      auto& g = an.grad_buffer();
      for (std::size_t p = 0; p < ps.size(); ++p)
        for (std::size_t j = 0; j < h; ++j) g[ps[p].target * h + j] += self.grad[p * h + j];
    }
    if (bn.requires_grad) {
      auto& g = bn.grad_buffer();
      for (std::size_t p = 0; p < ps.size(); ++p)
        for (std::size_t j = 0; j < h; ++j) g[ps[p].source * h + j] += self.grad[p * h + j];
    }
  });
}

Tensor scatter_pairs(const Tensor& values, std::span<const RowPair> pairs, std::size_t n_rows,
                     std::size_t n_cols) {
  if (values.numel() != pairs.size()) {
    throw DimensionError("scatter_pairs: " + std::to_string(pairs.size()) + " pairs but values " +
                         shape_str(values.shape()));
  }
  std::vector<std::size_t> flat(pairs.size());
  std::vector<double> out(n_rows * n_cols, 0.0);
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    if (pairs[p].target >= n_rows || pairs[p].source >= n_cols) {
      throw DimensionError("scatter_pairs: pair index out of range");
    }
    flat[p] = pairs[p].target * n_cols + pairs[p].source;
    out[flat[p]] = values[p];
  }
  return make_result({n_rows, n_cols}, std::move(out), {values.node()}, [flat](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t p = 0; p < flat.size(); ++p) g[p] += self.grad[flat[p]];
  });
}

Tensor masked_log(const Tensor& x, const std::vector<bool>& allowed, double eps) {
  if (allowed.size() != x.numel()) {
    throw DimensionError("masked_log: pattern size does not match " + shape_str(x.shape()));
  }
  if (!(eps > 0.0)) throw ContractError("masked_log: eps must be positive");
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = allowed[i] ? std::log(x[i] + eps) : -kLarge;
  return make_result(x.shape(), std::move(out), {x.node()}, [allowed, eps](Node& self) {
    Node& in = *self.inputs[0];
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (allowed[i]) g[i] += self.grad[i] / (in.value[i] + eps);
  });
}

Tensor binary_cross_entropy(const Tensor& probs, int label, double pos_weight) {
  if (label != 0 && label != 1) throw ContractError("binary_cross_entropy: label must be 0 or 1");
  constexpr double kClamp = 1e-12;
  const std::size_t n = probs.numel();
  const double inv = 1.0 / static_cast<double>(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double s = probs[i];
    total += label == 1 ? -pos_weight * std::log(std::max(s, kClamp))
                        : -std::log(std::max(1.0 - s, kClamp));
  }
  return make_result({1}, {total * inv}, {probs.node()}, [label, pos_weight, inv](Node& self) {
    Node& in = *self.inputs[0];
    auto& g = in.grad_buffer();
    const double up = self.grad[0] * inv;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = in.value[i];
      if (label == 1) {
        if (s > kClamp) g[i] += -pos_weight * up / s;
      } else {
        if (1.0 - s > kClamp) g[i] += up / (1.0 - s);
      }
    }
  });
}

double grad_check(const std::function<Tensor()>& build, std::vector<Tensor>& params, double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) {
    throw ContractError("grad_check: eps must lie in [1e-7, 1e-3]");
  }
  for (auto& p : params) p.zero_grad();
  Tensor loss = build();
  if (loss.numel() != 1) {
    throw ContractError("grad_check: loss must be scalar, got " + shape_str(loss.shape()));
  }
  backward(loss);

  double worst = 0.0;
  for (auto& p : params) {
    std::vector<double> analytic(p.numel(), 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
    auto vals = p.mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + eps;
      const double up = build().item();
      vals[i] = orig - eps;
      const double down = build().item();
      vals[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace tamformer
