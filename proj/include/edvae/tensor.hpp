#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "edvae/errors.hpp"

namespace edvae {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated lazily; same length as data when present
  bool requires_grad = false;
  uint64_t tape_mark = 0;  // dedup marker, owned by Tape

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  void ensure_zero_grad() {
    grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

// Dense row-major tensor of 64-bit floats. Value-semantic handle to a shared
// node; data is immutable once it participates in recorded ops, except for
// leaf parameters which the optimizer updates between passes.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int64_t extent(int axis) const { return node_->shape[static_cast<size_t>(axis)]; }
  int64_t numel() const { return node_->numel(); }

  std::span<const double> data() const { return node_->data; }
  // Mutable access for leaf initialization and optimizer updates. Mutating a
  // tensor that already participates in a recorded graph is a caller bug.
  std::span<double> raw_data() { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> raw_grad() { return node_->grad; }
  void zero_grad() { node_->ensure_zero_grad(); }

  double item() const;
  double at(std::initializer_list<int64_t> index) const;

  std::shared_ptr<detail::TensorNode> node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::TensorNode> node_;

  friend Tensor make_tensor(Shape, std::vector<double>, bool);
};

Tensor make_tensor(Shape shape, std::vector<double> data, bool requires_grad);

namespace detail {
// Allocates and zeroes the node's gradient buffer if missing. For use inside
// adjoint closures of custom ops.
std::vector<double>& ensure_grad(const std::shared_ptr<TensorNode>& node);
}  // namespace detail

namespace ops {
// True when a tape is active and any input requires gradients; custom ops
// outside tensor.cpp use these to participate in the tape protocol.
bool recording(std::initializer_list<const Tensor*> inputs);
void record_custom(std::initializer_list<const Tensor*> inputs, Tensor& out,
                   std::function<void()> adjoint);
}  // namespace ops

// Linear record of executed differentiable ops. Execution order is a
// topological order of the graph, so replaying adjoints back-to-front visits
// every node exactly once. backward() re-zeros all touched gradients before
// replaying, so running it twice gives bit-identical results.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void backward(const Tensor& loss);
  void clear();
  size_t num_ops() const { return adjoints_.size(); }

  // Record an op: the nodes it touches plus a closure that accumulates
  // adjoints into the inputs' grads from the output's grad.
  void record(std::vector<std::shared_ptr<detail::TensorNode>> touched,
              std::function<void()> adjoint);

  static Tape* active();

  // Activates a tape for recording on the current thread for its lifetime.
  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

 private:
  std::vector<std::function<void()>> adjoints_;
  std::vector<std::shared_ptr<detail::TensorNode>> nodes_;
  uint64_t mark_;
};

// ---- ops -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int padding);
Tensor maxpool2(const Tensor& x);
Tensor upsample_nearest2(const Tensor& x);

Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
// x * log(x) with the 0 * log 0 := 0 convention; entropy building block.
Tensor xlogx(const Tensor& x);
Tensor clamp_max(const Tensor& x, double bound);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& x, double c);
Tensor mul_scalar(const Tensor& x, double c);

Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, int axis, bool keepdim = false);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, int axis, bool keepdim = false);

Tensor softmax(const Tensor& x, int axis, double temperature);

Tensor reshape(const Tensor& x, Shape shape);
// Layout conversions between conv (B,C,H,W) and per-position (B,H,W,C) form.
Tensor nchw_to_nhwc(const Tensor& x);
Tensor nhwc_to_nchw(const Tensor& x);

// Row lookup into a (K, D) table; adjoint scatter-adds into the table.
Tensor gather_rows(const Tensor& table, std::span<const int64_t> indices);
// Forward takes `values`; backward copies the output gradient onto `source`
// unchanged (straight-through estimator).
Tensor straight_through(const Tensor& source, const Tensor& values);
Tensor detach(const Tensor& x);

// ---- serialization ----------------------------------------------------

// Little-endian binary: "EDVT", u32 rank, u32 extents..., raw 64-bit floats.
void write_edvt(std::ostream& out, const Tensor& t);
Tensor read_edvt(std::istream& in);

}  // namespace edvae
