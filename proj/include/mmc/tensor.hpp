#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace mmc {

using Shape = std::vector<std::int64_t>;

// One node of the computation record. Nodes are created by the forward
// ops below; `backprop` pushes this node's gradient into its parents.
struct TensorNode {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // allocated lazily by backward()
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backprop;
  const char* op = "leaf";

  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
};

// Dense row-major f64 array participating in reverse-mode differentiation.
// Copying a Tensor copies the handle, not the buffer.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value);
  static Tensor eye(std::int64_t n);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t rank() const { return static_cast<std::int64_t>(node_->shape.size()); }
  std::int64_t dim(std::int64_t i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t size() const { return node_->size(); }
  bool requires_grad() const { return node_->requires_grad; }

  const std::vector<double>& data() const { return node_->data; }
  std::vector<double>& mutable_data() { return node_->data; }
  const std::vector<double>& grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }

  double value() const;                       // size-1 tensors
  double at(std::int64_t r, std::int64_t c) const;  // rank-2

  std::shared_ptr<TensorNode> node() const { return node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

std::string shape_str(const Shape& s);

// ---- primitive ops -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator/(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a);

Tensor operator+(const Tensor& a, double s);
Tensor operator-(const Tensor& a, double s);
Tensor operator*(const Tensor& a, double s);
Tensor operator/(const Tensor& a, double s);
Tensor operator+(double s, const Tensor& a);
Tensor operator-(double s, const Tensor& a);
Tensor operator*(double s, const Tensor& a);
Tensor operator/(double s, const Tensor& a);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
// max(a, c) elementwise; the subgradient passes only where a > c.
Tensor clamp_min(const Tensor& a, double c);

Tensor sum(const Tensor& a, std::int64_t axis, bool keepdims = false);
Tensor mean(const Tensor& a, std::int64_t axis, bool keepdims = false);
Tensor logsumexp(const Tensor& a, std::int64_t axis, bool keepdims = false);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

Tensor broadcast_to(const Tensor& a, const Shape& shape);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::int64_t axis);
Tensor slice(const Tensor& a, std::int64_t axis, std::int64_t start, std::int64_t len);
// Row selection along axis 0 (duplicates allowed; backward scatter-adds).
Tensor index_rows(const Tensor& a, const std::vector<std::int64_t>& rows);
// One column index per row of a rank-2 tensor; result is n x 1.
Tensor gather_cols(const Tensor& a, const std::vector<std::int64_t>& cols);
Tensor diag_embed(const Tensor& v);  // rank-1 {d} -> {d, d}

Tensor softmax(const Tensor& a, std::int64_t axis);  // composed

// Reverse pass from a scalar loss. Gradients of requires_grad leaves are
// accumulated; the recorded graph is released afterwards.
void backward(const Tensor& loss);

// ---- optimizer -----------------------------------------------------------

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamOptions opt = {});

  // Applies one update from the accumulated gradients. Parameters whose
  // gradient contains a non-finite value are skipped; returns how many
  // were skipped. The step count always advances.
  int step();
  void zero_grad();
  void set_lr(double lr) { opt_.lr = lr; }
  std::int64_t step_count() const { return step_; }

 private:
  struct Slot {
    std::vector<double> m, v;
  };
  std::vector<Tensor> params_;
  std::vector<Slot> slots_;
  AdamOptions opt_;
  std::int64_t step_ = 0;
};

}  // namespace mmc
