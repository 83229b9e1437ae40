#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace foal {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until the first accumulation
  bool requires_grad = false;
  bool consumed = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads self.grad, accumulates into the parents' grads.
  std::function<void(Node& self)> backward;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

}  // namespace detail

// Dense row-major array of doubles taking part in reverse-mode
// differentiation. Copies share the underlying node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  // Negative axes count from the end.
  std::size_t dim(int axis) const;
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  // In-place access for optimizers and finite-difference probing.
  std::span<double> mutable_data() { return node_->value; }
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  // Zero-filled view when no gradient has been accumulated yet.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  const char* op_name() const { return node_->op; }
  bool is_leaf() const { return node_->parents.empty(); }

  // Same values, no history.
  Tensor detach() const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }
  static Tensor wrap(std::shared_ptr<detail::Node> node);

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

// Elementwise with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor relu(const Tensor& x);

// [..., m, k] x [..., k, n] -> [..., m, n]; batch axes broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);
// Swaps the last two axes.
Tensor transpose(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Max-subtracted softmax / log-softmax along `axis`.
Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x, int axis);

// [N, T, D] -> [N, D], mean over T.
Tensor mean_pool_time(const Tensor& x);
Tensor concat(const std::vector<Tensor>& xs, int axis);
// Half-open range [begin, end) along axis.
Tensor slice(const Tensor& x, int axis, std::size_t begin, std::size_t end);
// Gathers entries of axis 0; indices may repeat.
Tensor index_rows(const Tensor& x, std::span<const std::size_t> indices);

// Mean over rows of -log_softmax(logits)[n, target_n].
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

// Normalizes over the last axis, then applies gain and bias of shape [D].
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);
// Divides each vector along the last axis by max(norm, eps).
Tensor l2_normalize(const Tensor& x, double eps = 1e-12);

// Runs reverse accumulation from a scalar root. Each forward graph can be
// differentiated once; a second call throws NumericError.
void backward(const Tensor& loss);

// Throws NumericError naming the earliest op in the history of `t` that
// produced a non-finite value.
void check_finite(const Tensor& t, const std::string& what = "tensor");

}  // namespace foal
