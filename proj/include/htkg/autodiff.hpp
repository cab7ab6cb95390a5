#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace htkg::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& s);
std::string shape_str(const Shape& s);

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized on first touch during backward()
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Distributes this node's grad into the parents' grads (additively).
  std::function<void(Node&)> backprop;

  double* grad_data();
};

// Thread-local switch: with grads disabled, ops produce detached nodes and the
// tape is never built. Evaluation and finite differencing run in this mode.
bool grad_enabled();

struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Value-semantic handle onto a graph node. Copies alias the same node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor leaf(Shape shape, std::vector<double> value, bool requires_grad);
  static Tensor constant(Shape shape, std::vector<double> value);
  static Tensor zeros(Shape shape);
  static Tensor scalar(double v);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->value.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape[i]; }
  std::size_t rank() const { return node_->shape.size(); }

  const std::vector<double>& values() const { return node_->value; }
  // Mutable access for leaves (parameter updates, finite differencing).
  std::vector<double>& values_mut() { return node_->value; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  const std::vector<double>& grad() const;
  void zero_grad();

  // Reverse pass from a scalar output.
  void backward() const;

  std::shared_ptr<Node> node() const { return node_; }
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<Node> node_;
};

// ---- primitive operations ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double a);
// x scaled by a 1-element tensor (keeps the scalar on the tape).
Tensor scale_by(const Tensor& x, const Tensor& s);
// g*x + (1-g)*y with a 1-element gate tensor. Exact at g==0 and g==1.
Tensor blend(const Tensor& gate, const Tensor& x, const Tensor& y);

// matmul supports (m,k)x(k,n)->(m,n), (m,k)x(k)->(m), (k)x(k,n)->(n).
Tensor matmul(const Tensor& a, const Tensor& b);
// a(m,k) * b(n,k)^T -> (m,n); avoids materialised transposes in attention.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// A(k,m)^T x(k) -> (m).
Tensor matvec_t(const Tensor& a, const Tensor& x);

Tensor concat(const Tensor& a, const Tensor& b);  // 1-D, last (only) axis
Tensor dot(const Tensor& a, const Tensor& b);     // 1-D -> scalar
Tensor sum(const Tensor& x);                      // all elements -> scalar

// axis 0 = down columns (rows compete), axis 1 / last = across each row.
Tensor softmax(const Tensor& x, int axis);
Tensor sigmoid(const Tensor& x);
Tensor tanh_act(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor cosine(const Tensor& x);

Tensor mean_list(std::span<const Tensor> xs);
Tensor sum_list(std::span<const Tensor> xs);

// Row-wise layer norm over the last axis with affine gain/bias of that width.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Inverted dropout with an explicit 0/1 mask (same shape as x).
Tensor dropout(const Tensor& x, const Tensor& mask, double rate);

Tensor gather_rows(const Tensor& matrix, std::span<const std::uint32_t> ids);
Tensor take_row(const Tensor& matrix, std::size_t row);  // -> 1-D
Tensor stack_rows(std::span<const Tensor> rows);          // n x (d) -> (n,d)
Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count);
Tensor concat_cols(std::span<const Tensor> xs);

// Pairs (x[j], x[j+d/2]) as complex numbers; rotates pair j by angle r[j].
// The rotor has unit modulus, so per-pair magnitude is preserved.
Tensor complex_rotate(const Tensor& e, const Tensor& r);

// Mean over |E| binary cross-entropy terms of logistic(scores) against a
// one-hot truth. Probabilities are clamped to [1e-12, 1-1e-12] before log.
Tensor bce_logits_onehot(const Tensor& scores, std::size_t truth_index);

}  // namespace htkg::ad
