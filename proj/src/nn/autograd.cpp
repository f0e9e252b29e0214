#include "samediff/nn/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

#include <Eigen/Dense>

namespace samediff::nn {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;
using VecMap = Eigen::Map<Eigen::VectorXf>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXf>;

// --- Tensor ---

std::size_t Tensor::numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("negative tensor dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor::Tensor(std::vector<int> s, float fill) : shape(std::move(s)), data(numel(shape), fill) {}

Tensor::Tensor(std::vector<int> s, std::vector<float> values)
    : shape(std::move(s)), data(values.begin(), values.end()) {
  check_size();
}

void Tensor::check_size() const {
  if (data.size() != numel(shape))
    throw std::invalid_argument("tensor data length does not match shape " + shape_string(shape));
}

bool Tensor::all_finite() const {
  return std::all_of(data.begin(), data.end(), [](float v) { return std::isfinite(v); });
}

std::string shape_string(const std::vector<int>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor& Node::ensure_grad() {
  if (grad.data.size() != value.data.size()) grad = Tensor(value.shape, 0.0f);
  return grad;
}

// --- Var ---

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

float Var::item() const {
  if (node_->value.size() != 1) throw std::logic_error("item() on a multi-element tensor");
  return node_->value.data[0];
}

void Var::zero_grad() {
  if (!node_->grad.data.empty()) std::fill(node_->grad.data.begin(), node_->grad.data.end(), 0.0f);
}

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

namespace {

Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> fn) {
  Var out(std::move(value));
  if (!g_grad_enabled) return out;
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (needs) {
    auto& node = *out.node();
    node.requires_grad = true;
    for (auto& in : inputs) node.parents.push_back(in.node());
    node.backward_fn = std::move(fn);
  }
  return out;
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                                " vs " + shape_string(b.shape()));
}

void require_same_shape(const Var& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape)
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                                " vs " + shape_string(b.shape));
}

}  // namespace

void backward(const Var& loss) {
  if (!loss.value().all_finite()) throw NumericalError("non-finite loss");
  if (!loss.requires_grad()) return;
  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack = {{loss.node().get(), 0}};
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  auto& g = loss.node()->ensure_grad();
  std::fill(g.data.begin(), g.data.end(), 1.0f);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.data.empty()) n->backward_fn(*n);
  }
}

// --- Layers ---

Var linear(const Var& x, const Var& w, const Var& b) {
  if (x.shape().size() != 2 || w.shape().size() != 2 || x.shape()[1] != w.shape()[0] ||
      b.value().size() != static_cast<std::size_t>(w.shape()[1]))
    throw std::invalid_argument("linear: bad shapes " + shape_string(x.shape()) + " x " +
                                shape_string(w.shape()));
  const int n = x.shape()[0];
  const int in = w.shape()[0];
  const int out = w.shape()[1];
  Tensor y({n, out});
  MatMap Y(y.ptr(), n, out);
  Y.noalias() = ConstMatMap(x.value().ptr(), n, in) * ConstMatMap(w.value().ptr(), in, out);
  Y.rowwise() += ConstVecMap(b.value().ptr(), out).transpose();
  return make_result(std::move(y), {x, w, b}, [n, in, out](Node& self) {
    ConstMatMap dY(self.grad.ptr(), n, out);
    Node& xn = *self.parents[0];
    Node& wn = *self.parents[1];
    Node& bn = *self.parents[2];
    if (wn.requires_grad) {
      MatMap(wn.ensure_grad().ptr(), in, out).noalias() +=
          ConstMatMap(xn.value.ptr(), n, in).transpose() * dY;
    }
    if (bn.requires_grad) VecMap(bn.ensure_grad().ptr(), out) += dY.colwise().sum().transpose();
    if (xn.requires_grad) {
      MatMap(xn.ensure_grad().ptr(), n, in).noalias() +=
          dY * ConstMatMap(wn.value.ptr(), in, out).transpose();
    }
  });
}

Var conv2d(const Var& x, const Var& w, const Var& b, int kernel, int stride) {
  const auto& xs = x.shape();
  if (xs.size() != 4) throw std::invalid_argument("conv2d: input must be NHWC");
  const int n = xs[0], h = xs[1], wd = xs[2], c = xs[3];
  const int k = kernel;
  const int patch = k * k * c;
  if (w.shape().size() != 2 || w.shape()[0] != patch)
    throw std::invalid_argument("conv2d: weight shape " + shape_string(w.shape()) +
                                " does not match input " + shape_string(xs));
  const int f = w.shape()[1];
  if (b.value().size() != static_cast<std::size_t>(f)) throw std::invalid_argument("conv2d: bias");
  if (h < k || wd < k) throw std::invalid_argument("conv2d: input smaller than kernel");
  const int oh = (h - k) / stride + 1;
  const int ow = (wd - k) / stride + 1;
  const int rows = n * oh * ow;

  auto cols = std::make_shared<std::vector<float>>(static_cast<std::size_t>(rows) * patch);
  const float* xp = x.value().ptr();
  for (int img = 0; img < n; ++img)
    for (int r = 0; r < oh; ++r)
      for (int q = 0; q < ow; ++q) {
        float* dst = cols->data() + ((static_cast<std::size_t>(img) * oh + r) * ow + q) * patch;
        for (int kh = 0; kh < k; ++kh) {
          const float* src =
              xp + ((static_cast<std::size_t>(img) * h + r * stride + kh) * wd + q * stride) * c;
          std::copy(src, src + static_cast<std::size_t>(k) * c, dst + static_cast<std::size_t>(kh) * k * c);
        }
      }

  Tensor y({n, oh, ow, f});
  MatMap Y(y.ptr(), rows, f);
  Y.noalias() = ConstMatMap(cols->data(), rows, patch) * ConstMatMap(w.value().ptr(), patch, f);
  Y.rowwise() += ConstVecMap(b.value().ptr(), f).transpose();

  return make_result(std::move(y), {x, w, b},
                     [cols, n, h, wd, c, k, stride, oh, ow, f, rows, patch](Node& self) {
                       ConstMatMap dY(self.grad.ptr(), rows, f);
                       Node& xn = *self.parents[0];
                       Node& wn = *self.parents[1];
                       Node& bn = *self.parents[2];
                       if (wn.requires_grad) {
                         MatMap(wn.ensure_grad().ptr(), patch, f).noalias() +=
                             ConstMatMap(cols->data(), rows, patch).transpose() * dY;
                       }
                       if (bn.requires_grad)
                         VecMap(bn.ensure_grad().ptr(), f) += dY.colwise().sum().transpose();
                       if (xn.requires_grad) {
                         RowMatrix dcols = dY * ConstMatMap(wn.value.ptr(), patch, f).transpose();
                         float* dx = xn.ensure_grad().ptr();
                         for (int img = 0; img < n; ++img)
                           for (int r = 0; r < oh; ++r)
                             for (int q = 0; q < ow; ++q) {
                               const float* src =
                                   dcols.data() +
                                   ((static_cast<std::size_t>(img) * oh + r) * ow + q) * patch;
                               for (int kh = 0; kh < k; ++kh) {
                                 float* dst = dx + ((static_cast<std::size_t>(img) * h +
                                                     r * stride + kh) * wd + q * stride) * c;
                                 const float* s = src + static_cast<std::size_t>(kh) * k * c;
                                 for (int e = 0; e < k * c; ++e) dst[e] += s[e];
                               }
                             }
                       }
                     });
}

Var leaky_relu(const Var& x, float slope) {
  Tensor y(x.shape());
  const auto& xv = x.value().data;
  for (std::size_t i = 0; i < xv.size(); ++i) y.data[i] = xv[i] > 0.0f ? xv[i] : slope * xv[i];
  return make_result(std::move(y), {x}, [slope](Node& self) {
    Node& xn = *self.parents[0];
    auto& dx = xn.ensure_grad().data;
    const auto& xv = xn.value.data;
    const auto& dy = self.grad.data;
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += xv[i] > 0.0f ? dy[i] : slope * dy[i];
  });
}

Var reshape(const Var& x, std::vector<int> shape) {
  if (Tensor::numel(shape) != x.value().size())
    throw std::invalid_argument("reshape: " + shape_string(x.shape()) + " -> " + shape_string(shape));
  Tensor y(std::move(shape), x.value().data);
  return make_result(std::move(y), {x}, [](Node& self) {
    auto& dx = self.parents[0]->ensure_grad().data;
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += self.grad.data[i];
  });
}

Var concat_cols(const Var& a, const Var& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[0] != b.shape()[0])
    throw std::invalid_argument("concat_cols: bad shapes");
  const int n = a.shape()[0], p = a.shape()[1], q = b.shape()[1];
  Tensor y({n, p + q});
  for (int i = 0; i < n; ++i) {
    std::copy_n(a.value().ptr() + static_cast<std::size_t>(i) * p, p,
                y.ptr() + static_cast<std::size_t>(i) * (p + q));
    std::copy_n(b.value().ptr() + static_cast<std::size_t>(i) * q, q,
                y.ptr() + static_cast<std::size_t>(i) * (p + q) + p);
  }
  return make_result(std::move(y), {a, b}, [n, p, q](Node& self) {
    Node& an = *self.parents[0];
    Node& bn = *self.parents[1];
    for (int i = 0; i < n; ++i) {
      const float* g = self.grad.ptr() + static_cast<std::size_t>(i) * (p + q);
      if (an.requires_grad) {
        float* d = an.ensure_grad().ptr() + static_cast<std::size_t>(i) * p;
        for (int j = 0; j < p; ++j) d[j] += g[j];
      }
      if (bn.requires_grad) {
        float* d = bn.ensure_grad().ptr() + static_cast<std::size_t>(i) * q;
        for (int j = 0; j < q; ++j) d[j] += g[p + j];
      }
    }
  });
}

// --- Elementwise ---

namespace {

// y = f(x); dx += dy * df(x, y)
template <typename F, typename DF>
Var unary(const Var& x, F f, DF df) {
  Tensor y(x.shape());
  const auto& xv = x.value().data;
  for (std::size_t i = 0; i < xv.size(); ++i) y.data[i] = f(xv[i]);
  return make_result(std::move(y), {x}, [df](Node& self) {
    Node& xn = *self.parents[0];
    auto& dx = xn.ensure_grad().data;
    const auto& xv = xn.value.data;
    const auto& yv = self.value.data;
    const auto& dy = self.grad.data;
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * df(xv[i], yv[i]);
  });
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] = a.value().data[i] + b.value().data[i];
  return make_result(std::move(y), {a, b}, [](Node& self) {
    for (int p = 0; p < 2; ++p) {
      Node& in = *self.parents[p];
      if (!in.requires_grad) continue;
      auto& d = in.ensure_grad().data;
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad.data[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] = a.value().data[i] - b.value().data[i];
  return make_result(std::move(y), {a, b}, [](Node& self) {
    for (int p = 0; p < 2; ++p) {
      Node& in = *self.parents[p];
      if (!in.requires_grad) continue;
      const float sign = p == 0 ? 1.0f : -1.0f;
      auto& d = in.ensure_grad().data;
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += sign * self.grad.data[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] = a.value().data[i] * b.value().data[i];
  return make_result(std::move(y), {a, b}, [](Node& self) {
    Node& an = *self.parents[0];
    Node& bn = *self.parents[1];
    if (an.requires_grad) {
      auto& d = an.ensure_grad().data;
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad.data[i] * bn.value.data[i];
    }
    if (bn.requires_grad) {
      auto& d = bn.ensure_grad().data;
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad.data[i] * an.value.data[i];
    }
  });
}

Var minimum(const Var& a, const Var& b) {
  require_same_shape(a, b, "minimum");
  Tensor y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i)
    y.data[i] = std::min(a.value().data[i], b.value().data[i]);
  return make_result(std::move(y), {a, b}, [](Node& self) {
    Node& an = *self.parents[0];
    Node& bn = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      // Ties route the gradient to the first argument.
      const bool first = an.value.data[i] <= bn.value.data[i];
      Node& target = first ? an : bn;
      if (target.requires_grad) target.ensure_grad().data[i] += self.grad.data[i];
    }
  });
}

Var add_const(const Var& a, const Tensor& c) {
  require_same_shape(a, c, "add_const");
  Tensor y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] = a.value().data[i] + c.data[i];
  return make_result(std::move(y), {a}, [](Node& self) {
    auto& d = self.parents[0]->ensure_grad().data;
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad.data[i];
  });
}

Var mul_const(const Var& a, const Tensor& c) {
  require_same_shape(a, c, "mul_const");
  Tensor y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] = a.value().data[i] * c.data[i];
  auto cc = std::make_shared<FloatBuffer>(c.data);
  return make_result(std::move(y), {a}, [cc](Node& self) {
    auto& d = self.parents[0]->ensure_grad().data;
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad.data[i] * (*cc)[i];
  });
}

Var scale(const Var& a, float s) {
  return unary(a, [s](float v) { return s * v; }, [s](float, float) { return s; });
}

Var add_scalar(const Var& a, float s) {
  return unary(a, [s](float v) { return v + s; }, [](float, float) { return 1.0f; });
}

Var exp(const Var& a) {
  return unary(a, [](float v) { return std::exp(v); }, [](float, float y) { return y; });
}

Var log(const Var& a) {
  return unary(a, [](float v) { return std::log(v); }, [](float x, float) { return 1.0f / x; });
}

Var square(const Var& a) {
  return unary(a, [](float v) { return v * v; }, [](float x, float) { return 2.0f * x; });
}

Var sigmoid(const Var& a) {
  return unary(
      a, [](float v) { return v >= 0 ? 1.0f / (1.0f + std::exp(-v)) : std::exp(v) / (1.0f + std::exp(v)); },
      [](float, float y) { return y * (1.0f - y); });
}

Var softplus(const Var& a) {
  return unary(
      a, [](float v) { return std::max(v, 0.0f) + std::log1p(std::exp(-std::abs(v))); },
      [](float x, float) {
        return x >= 0 ? 1.0f / (1.0f + std::exp(-x)) : std::exp(x) / (1.0f + std::exp(x));
      });
}

Var clamp(const Var& a, float lo, float hi) {
  return unary(
      a, [lo, hi](float v) { return std::clamp(v, lo, hi); },
      [lo, hi](float x, float) { return (x > lo && x < hi) ? 1.0f : 0.0f; });
}

// --- Reductions ---

Var sum(const Var& a) {
  double s = 0.0;
  for (float v : a.value().data) s += v;
  Tensor y({1}, static_cast<float>(s));
  return make_result(std::move(y), {a}, [](Node& self) {
    auto& d = self.parents[0]->ensure_grad().data;
    const float g = self.grad.data[0];
    for (auto& v : d) v += g;
  });
}

Var mean(const Var& a) {
  if (a.value().size() == 0) throw std::invalid_argument("mean of empty tensor");
  return scale(sum(a), 1.0f / static_cast<float>(a.value().size()));
}

Var row_sum(const Var& a) {
  if (a.shape().size() != 2) throw std::invalid_argument("row_sum: expected [N, A]");
  const int n = a.shape()[0], k = a.shape()[1];
  Tensor y({n});
  for (int i = 0; i < n; ++i) {
    float s = 0.0f;
    for (int j = 0; j < k; ++j) s += a.value().data[static_cast<std::size_t>(i) * k + j];
    y.data[i] = s;
  }
  return make_result(std::move(y), {a}, [n, k](Node& self) {
    auto& d = self.parents[0]->ensure_grad().data;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < k; ++j) d[static_cast<std::size_t>(i) * k + j] += self.grad.data[i];
  });
}

Var log_softmax(const Var& logits) {
  if (logits.shape().size() != 2) throw std::invalid_argument("log_softmax: expected [N, A]");
  const int n = logits.shape()[0], k = logits.shape()[1];
  Tensor y({n, k});
  for (int i = 0; i < n; ++i) {
    const float* x = logits.value().ptr() + static_cast<std::size_t>(i) * k;
    float* o = y.ptr() + static_cast<std::size_t>(i) * k;
    const float m = *std::max_element(x, x + k);
    double s = 0.0;
    for (int j = 0; j < k; ++j) s += std::exp(static_cast<double>(x[j] - m));
    const float lse = m + static_cast<float>(std::log(s));
    for (int j = 0; j < k; ++j) o[j] = x[j] - lse;
  }
  return make_result(std::move(y), {logits}, [n, k](Node& self) {
    auto& d = self.parents[0]->ensure_grad().data;
    for (int i = 0; i < n; ++i) {
      const float* g = self.grad.ptr() + static_cast<std::size_t>(i) * k;
      const float* ly = self.value.ptr() + static_cast<std::size_t>(i) * k;
      float gs = 0.0f;
      for (int j = 0; j < k; ++j) gs += g[j];
      for (int j = 0; j < k; ++j)
        d[static_cast<std::size_t>(i) * k + j] += g[j] - std::exp(ly[j]) * gs;
    }
  });
}

Var gather_cols(const Var& a, std::span<const int> index) {
  if (a.shape().size() != 2 || static_cast<int>(index.size()) != a.shape()[0])
    throw std::invalid_argument("gather_cols: index length must equal rows");
  const int n = a.shape()[0], k = a.shape()[1];
  auto idx = std::make_shared<std::vector<int>>(index.begin(), index.end());
  Tensor y({n});
  for (int i = 0; i < n; ++i) {
    const int j = (*idx)[i];
    if (j < 0 || j >= k) throw std::out_of_range("gather_cols: index " + std::to_string(j));
    y.data[i] = a.value().data[static_cast<std::size_t>(i) * k + j];
  }
  return make_result(std::move(y), {a}, [idx, n, k](Node& self) {
    auto& d = self.parents[0]->ensure_grad().data;
    for (int i = 0; i < n; ++i) d[static_cast<std::size_t>(i) * k + (*idx)[i]] += self.grad.data[i];
  });
}

Var column(const Var& a, int j) {
  if (a.shape().size() != 2 || j < 0 || j >= a.shape()[1])
    throw std::invalid_argument("column: bad index");
  const int n = a.shape()[0], k = a.shape()[1];
  Tensor y({n});
  for (int i = 0; i < n; ++i) y.data[i] = a.value().data[static_cast<std::size_t>(i) * k + j];
  return make_result(std::move(y), {a}, [n, k, j](Node& self) {
    auto& d = self.parents[0]->ensure_grad().data;
    for (int i = 0; i < n; ++i) d[static_cast<std::size_t>(i) * k + j] += self.grad.data[i];
  });
}

}  // namespace samediff::nn
