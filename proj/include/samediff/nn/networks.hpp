#pragma once

// Fixed network family: a two-layer convolutional encoder feeding dense
// layers, with policy/value heads or a single discriminator logit.

#include <string>
#include <utility>
#include <vector>

#include "samediff/nn/autograd.hpp"
#include "samediff/render.hpp"
#include "samediff/rng.hpp"

namespace samediff::nn {

inline constexpr float kLeakySlope = 0.01f;
inline constexpr int kConvKernel = 5;
inline constexpr int kConvStride = 2;
inline constexpr int kConv1Filters = 16;
inline constexpr int kConv2Filters = 32;
inline constexpr int kPolicyHidden = 256;
inline constexpr int kDiscriminatorHidden = 128;

using NamedParams = std::vector<std::pair<std::string, Var>>;

// Orthogonal [rows, cols] matrix scaled by gain.
Tensor orthogonal(int rows, int cols, float gain, Rng& rng);

struct Dense {
  Var w;  // [in, out]
  Var b;  // [out]
  Dense() = default;
  Dense(int in, int out, float gain, Rng& rng);
  Var operator()(const Var& x) const { return linear(x, w, b); }
};

struct Conv2d {
  Var w;  // [K*K*C, F]
  Var b;  // [F]
  int kernel = kConvKernel;
  int stride = kConvStride;
  Conv2d() = default;
  Conv2d(int in_channels, int filters, int kernel, int stride, float gain, Rng& rng);
  Var operator()(const Var& x) const { return conv2d(x, w, b, kernel, stride); }
};

struct NetShape {
  int height = 64;
  int width = 64;
  int channels = 1;  // 1 = luminance, 4 = RGBA
  int history = 0;
  int actions = 2;

  int conv1_h() const { return (height - kConvKernel) / kConvStride + 1; }
  int conv1_w() const { return (width - kConvKernel) / kConvStride + 1; }
  int conv2_h() const { return (conv1_h() - kConvKernel) / kConvStride + 1; }
  int conv2_w() const { return (conv1_w() - kConvKernel) / kConvStride + 1; }
  int flat() const { return conv2_h() * conv2_w() * kConv2Filters; }
  void validate() const;
  bool operator==(const NetShape&) const = default;
};

// Writes one frame into dst ([H, W, channels], values in [0, 1]).
void frame_to_input(const Image& frame, int channels, float* dst);

struct ObsBatch {
  Tensor frames;   // [N, H, W, C]
  Tensor history;  // [N, history] (may have zero columns)
  int size() const { return frames.rank() ? frames.dim(0) : 0; }
};

struct ConvEncoder {
  Conv2d conv1;
  Conv2d conv2;
  ConvEncoder() = default;
  ConvEncoder(int channels, Rng& rng);
  Var operator()(const Var& frames) const;  // -> [N, flat]
};

struct PolicyOutput {
  Var logits;  // [N, actions]
  Var values;  // [N]
};

class PolicyValueNet {
 public:
  PolicyValueNet() = default;
  PolicyValueNet(const NetShape& shape, Rng& rng);

  PolicyOutput forward(const ObsBatch& batch) const;
  NamedParams parameters() const;
  const NetShape& shape() const { return shape_; }

  static std::size_t parameter_count(const NetShape& shape);

 private:
  NetShape shape_;
  ConvEncoder encoder_;
  Dense fc1_, fc2_, policy_, value_;
};

class Discriminator {
 public:
  Discriminator() = default;
  Discriminator(const NetShape& shape, Rng& rng);

  Var forward(const Tensor& frames) const;  // -> [N] logits
  NamedParams parameters() const;
  const NetShape& shape() const { return shape_; }

  static std::size_t parameter_count(const NetShape& shape);

 private:
  NetShape shape_;
  ConvEncoder encoder_;
  Dense fc1_, fc2_, out_;
};

// Copies parameter values from src into dst; names and shapes must match.
void copy_parameters(const NamedParams& src, const NamedParams& dst);

}  // namespace samediff::nn
