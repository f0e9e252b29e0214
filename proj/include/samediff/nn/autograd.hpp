#pragma once

// Minimal tensor type and tape-free reverse-mode differentiation. Each Var
// owns a node that remembers its parents and how to push gradients to them;
// backward() walks the graph in reverse topological order.

#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace samediff::nn {

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Vectorized Eigen kernels peel a different number of leading elements
// depending on the buffer address, which changes float summation order.
// Cache-line aligned storage keeps results independent of where the heap
// happens to place a tensor.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using FloatBuffer = std::vector<float, AlignedAllocator<float>>;

struct Tensor {
  std::vector<int> shape;
  FloatBuffer data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, float fill = 0.0f);
  Tensor(std::vector<int> s, std::vector<float> values);
  // Template so that braced value lists keep resolving to the overload above.
  template <class A>
    requires std::is_same_v<A, AlignedAllocator<float>>
  Tensor(std::vector<int> s, std::vector<float, A> values) : shape(std::move(s)), data(std::move(values)) {
    check_size();
  }

  std::size_t size() const { return data.size(); }
  int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }
  int rank() const { return static_cast<int>(shape.size()); }
  float* ptr() { return data.data(); }
  const float* ptr() const { return data.data(); }
  bool all_finite() const;

  static std::size_t numel(const std::vector<int>& shape);

 private:
  void check_size() const;
};

std::string shape_string(const std::vector<int>& shape);

struct Node {
  Tensor value;
  Tensor grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor& ensure_grad();
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  Tensor& grad() { return node_->grad; }
  const std::vector<int>& shape() const { return node_->value.shape; }
  bool requires_grad() const { return node_->requires_grad; }
  float item() const;  // single-element tensors only
  void zero_grad();

  const std::shared_ptr<Node>& node() const { return node_; }
  bool defined() const { return node_ != nullptr; }

 private:
  std::shared_ptr<Node> node_;
};

// While alive on a thread, ops on that thread record no graph. Used for
// rollout inference on shared parameters.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
// requires_grad leaf reachable from loss. Throws NumericalError when the loss
// is not finite.
void backward(const Var& loss);

// --- Layers ---

// x [N, in] * w [in, out] + b [out]
Var linear(const Var& x, const Var& w, const Var& b);

// NHWC convolution without padding. x [N, H, W, C], w [K*K*C, F], b [F].
Var conv2d(const Var& x, const Var& w, const Var& b, int kernel, int stride);

Var leaky_relu(const Var& x, float slope);
Var reshape(const Var& x, std::vector<int> shape);
// [N, p] ++ [N, q] -> [N, p + q]
Var concat_cols(const Var& a, const Var& b);

// --- Elementwise (shapes must match) ---

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var minimum(const Var& a, const Var& b);
Var add_const(const Var& a, const Tensor& c);
Var mul_const(const Var& a, const Tensor& c);
Var scale(const Var& a, float s);
Var add_scalar(const Var& a, float s);
Var exp(const Var& a);
Var log(const Var& a);
Var square(const Var& a);
Var sigmoid(const Var& a);
Var softplus(const Var& a);  // log(1 + e^x), stable
// Gradient passes only where lo < a < hi.
Var clamp(const Var& a, float lo, float hi);

// --- Reductions and indexing ---

Var sum(const Var& a);   // -> [1]
Var mean(const Var& a);  // -> [1]
Var row_sum(const Var& a);  // [N, A] -> [N]
Var log_softmax(const Var& logits);  // row-wise over [N, A]
Var gather_cols(const Var& a, std::span<const int> index);  // [N, A] -> [N]
Var column(const Var& a, int j);  // [N, K] -> [N]

}  // namespace samediff::nn
