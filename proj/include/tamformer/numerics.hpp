#pragma once

// Minimal define-by-run reverse-mode differentiation over dense float64
// tensors. Every operation allocates a new node that keeps its inputs alive;
// node ids grow monotonically so a single reverse sweep in id order visits
// consumers before producers.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace tamformer {

using Shape = std::vector<std::size_t>;

// Additive bias used for forbidden attention positions.
inline constexpr double kLarge = 1e9;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {
struct Node;
}

class Tensor {
 public:
  Tensor();

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value);
  // 2-D helper: {{1,2},{3,4}}.
  static Tensor matrix(const std::vector<std::vector<double>>& rows,
                       bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const;
  // Direct write access; only meaningful for leaves (parameters, inputs).
  std::span<double> mutable_values();
  double item() const;
  double at(std::size_t r, std::size_t c) const;
  double operator[](std::size_t i) const { return values()[i]; }

  bool requires_grad() const;
  bool has_grad() const;
  // Gradient accumulated by backward(); empty until the first sweep reaches it.
  std::span<const double> grad() const;
  void zero_grad();

  // Leaf copy of the values without any graph history.
  Tensor detach() const;
  Tensor clone(bool requires_grad) const;

  std::uint64_t id() const;
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> node_;
};

// Runs the reverse sweep from a scalar loss, accumulating into every
// reachable tensor with requires_grad. Leaf gradients accumulate across calls.
void backward(const Tensor& loss);

// --- primitive operations --------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Same-shape add, or row-broadcast of b ([m] or [1 x m]) onto a [n x m].
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

Tensor softmax_rows(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

Tensor concat_last_axis(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_sq(const Tensor& x);
// Same values, no gradient flows back through the result.
Tensor stop_gradient(const Tensor& x);

// Index pair (target row, source row) used by the pairwise ops below.
struct RowPair {
  std::size_t target;
  std::size_t source;
};

// out[p] = a[pairs[p].target] + b[pairs[p].source], shape [P x h].
Tensor pair_sum(const Tensor& a, const Tensor& b, std::span<const RowPair> pairs);
// Places values[p] (shape [P x 1] or [P]) at (target, source) of a zero
// [n_rows x n_cols] matrix.
Tensor scatter_pairs(const Tensor& values, std::span<const RowPair> pairs,
                     std::size_t n_rows, std::size_t n_cols);
// ln(x + eps) where allowed[i] is true, -kLarge elsewhere (no gradient there).
Tensor masked_log(const Tensor& x, const std::vector<bool>& allowed, double eps);

// Mean over entries of the binary cross-entropy of probabilities against a
// fixed label; arguments of ln are clamped at 1e-12. pos_weight scales the
// positive term.
Tensor binary_cross_entropy(const Tensor& probs, int label, double pos_weight = 1.0);

// --- verification ----------------------------------------------------------

// Compares analytic gradients with central differences over every entry of
// every parameter. Returns max |a - n| / max(|a|, |n|, 1e-8).
double grad_check(const std::function<Tensor()>& build,
                  std::vector<Tensor>& params, double eps = 1e-5);

}  // namespace tamformer
