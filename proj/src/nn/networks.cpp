#include "samediff/nn/networks.hpp"

#include <cmath>
#include <stdexcept>

#include <Eigen/Dense>

namespace samediff::nn {

Tensor orthogonal(int rows, int cols, float gain, Rng& rng) {
  if (rows <= 0 || cols <= 0) throw std::invalid_argument("orthogonal: empty shape");
  const bool tall = rows >= cols;
  const int r = tall ? rows : cols;
  const int c = tall ? cols : rows;
  Eigen::MatrixXd a(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) a(i, j) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(r, c);
  // Sign fix makes the distribution uniform over orthogonal matrices.
  const Eigen::MatrixXd rmat = qr.matrixQR().topRows(c).triangularView<Eigen::Upper>();
  for (int j = 0; j < c; ++j)
    if (rmat(j, j) < 0) q.col(j) *= -1.0;
  Tensor t({rows, cols});
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j)
      t.data[static_cast<std::size_t>(i) * cols + j] =
          static_cast<float>(gain * (tall ? q(i, j) : q(j, i)));
  return t;
}

Dense::Dense(int in, int out, float gain, Rng& rng)
    : w(orthogonal(in, out, gain, rng), true), b(Tensor({out}), true) {}

Conv2d::Conv2d(int in_channels, int filters, int k, int s, float gain, Rng& rng)
    : w(orthogonal(k * k * in_channels, filters, gain, rng), true),
      b(Tensor({filters}), true),
      kernel(k),
      stride(s) {}

void NetShape::validate() const {
  if (channels != 1 && channels != 4) throw std::invalid_argument("NetShape: channels must be 1 or 4");
  if (height <= 0 || width <= 0 || conv2_h() <= 0 || conv2_w() <= 0 ||
      (height - kConvKernel) < 0 || (conv1_h() - kConvKernel) < 0)
    throw std::invalid_argument("NetShape: image too small for the encoder");
  if (history < 0) throw std::invalid_argument("NetShape: negative history width");
  if (actions < 1) throw std::invalid_argument("NetShape: need at least one action");
}

void frame_to_input(const Image& frame, int channels, float* dst) {
  const std::size_t n = static_cast<std::size_t>(frame.width) * frame.height;
  constexpr float inv = 1.0f / 255.0f;
  if (channels == 1) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto* px = &frame.rgba[i * 4];
      dst[i] = (0.299f * px[0] + 0.587f * px[1] + 0.114f * px[2]) * inv;
    }
  } else if (channels == 4) {
    for (std::size_t i = 0; i < n * 4; ++i) dst[i] = frame.rgba[i] * inv;
  } else {
    throw std::invalid_argument("frame_to_input: channels must be 1 or 4");
  }
}

namespace {
const float kReluGain = std::sqrt(2.0f);
}

ConvEncoder::ConvEncoder(int channels, Rng& rng)
    : conv1(channels, kConv1Filters, kConvKernel, kConvStride, kReluGain, rng),
      conv2(kConv1Filters, kConv2Filters, kConvKernel, kConvStride, kReluGain, rng) {}

Var ConvEncoder::operator()(const Var& frames) const {
  Var h = leaky_relu(conv1(frames), kLeakySlope);
  h = leaky_relu(conv2(h), kLeakySlope);
  const int n = h.shape()[0];
  return reshape(h, {n, h.shape()[1] * h.shape()[2] * h.shape()[3]});
}

PolicyValueNet::PolicyValueNet(const NetShape& shape, Rng& rng) : shape_(shape) {
  shape_.validate();
  encoder_ = ConvEncoder(shape.channels, rng);
  fc1_ = Dense(shape.flat() + shape.history, kPolicyHidden, kReluGain, rng);
  fc2_ = Dense(kPolicyHidden, kPolicyHidden, kReluGain, rng);
  policy_ = Dense(kPolicyHidden, shape.actions, 0.01f, rng);
  value_ = Dense(kPolicyHidden, 1, 1.0f, rng);
}

PolicyOutput PolicyValueNet::forward(const ObsBatch& batch) const {
  const auto& f = batch.frames;
  if (f.rank() != 4 || f.dim(1) != shape_.height || f.dim(2) != shape_.width ||
      f.dim(3) != shape_.channels)
    throw std::invalid_argument("PolicyValueNet: frame batch " + shape_string(f.shape) +
                                " does not match the network");
  const int n = f.dim(0);
  if (batch.history.rank() != 2 || batch.history.dim(0) != n ||
      batch.history.dim(1) != shape_.history)
    throw std::invalid_argument("PolicyValueNet: history batch " +
                                shape_string(batch.history.shape) + " does not match the network");
  Var x = encoder_(Var(f));
  if (shape_.history > 0) x = concat_cols(x, Var(batch.history));
  Var h = leaky_relu(fc1_(x), kLeakySlope);
  h = leaky_relu(fc2_(h), kLeakySlope);
  PolicyOutput out;
  out.logits = policy_(h);
  out.values = reshape(value_(h), {n});
  return out;
}

NamedParams PolicyValueNet::parameters() const {
  return {{"conv1.w", encoder_.conv1.w}, {"conv1.b", encoder_.conv1.b},
          {"conv2.w", encoder_.conv2.w}, {"conv2.b", encoder_.conv2.b},
          {"fc1.w", fc1_.w},             {"fc1.b", fc1_.b},
          {"fc2.w", fc2_.w},             {"fc2.b", fc2_.b},
          {"policy.w", policy_.w},       {"policy.b", policy_.b},
          {"value.w", value_.w},         {"value.b", value_.b}};
}

namespace {
std::size_t encoder_params(int channels) {
  const std::size_t k2 = kConvKernel * kConvKernel;
  return (k2 * channels * kConv1Filters + kConv1Filters) +
         (k2 * kConv1Filters * kConv2Filters + kConv2Filters);
}
std::size_t dense_params(std::size_t in, std::size_t out) { return in * out + out; }
}  // namespace

std::size_t PolicyValueNet::parameter_count(const NetShape& s) {
  return encoder_params(s.channels) + dense_params(s.flat() + s.history, kPolicyHidden) +
         dense_params(kPolicyHidden, kPolicyHidden) + dense_params(kPolicyHidden, s.actions) +
         dense_params(kPolicyHidden, 1);
}

Discriminator::Discriminator(const NetShape& shape, Rng& rng) : shape_(shape) {
  shape_.validate();
  encoder_ = ConvEncoder(shape.channels, rng);
  fc1_ = Dense(shape.flat(), kDiscriminatorHidden, kReluGain, rng);
  fc2_ = Dense(kDiscriminatorHidden, kDiscriminatorHidden, kReluGain, rng);
  out_ = Dense(kDiscriminatorHidden, 1, 1.0f, rng);
}

Var Discriminator::forward(const Tensor& frames) const {
  if (frames.rank() != 4 || frames.dim(1) != shape_.height || frames.dim(2) != shape_.width ||
      frames.dim(3) != shape_.channels)
    throw std::invalid_argument("Discriminator: frame batch " + shape_string(frames.shape) +
                                " does not match the network");
  Var h = encoder_(Var(frames));
  h = leaky_relu(fc1_(h), kLeakySlope);
  h = leaky_relu(fc2_(h), kLeakySlope);
  return reshape(out_(h), {frames.dim(0)});
}

NamedParams Discriminator::parameters() const {
  return {{"conv1.w", encoder_.conv1.w}, {"conv1.b", encoder_.conv1.b},
          {"conv2.w", encoder_.conv2.w}, {"conv2.b", encoder_.conv2.b},
          {"fc1.w", fc1_.w},             {"fc1.b", fc1_.b},
          {"fc2.w", fc2_.w},             {"fc2.b", fc2_.b},
          {"out.w", out_.w},             {"out.b", out_.b}};
}

std::size_t Discriminator::parameter_count(const NetShape& s) {
  return encoder_params(s.channels) + dense_params(s.flat(), kDiscriminatorHidden) +
         dense_params(kDiscriminatorHidden, kDiscriminatorHidden) +
         dense_params(kDiscriminatorHidden, 1);
}

void copy_parameters(const NamedParams& src, const NamedParams& dst) {
  if (src.size() != dst.size()) throw std::invalid_argument("copy_parameters: count mismatch");
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].first != dst[i].first || src[i].second.shape() != dst[i].second.shape())
      throw std::invalid_argument("copy_parameters: mismatch at " + src[i].first);
    Var d = dst[i].second;
    d.mutable_value().data = src[i].second.value().data;
  }
}

}  // namespace samediff::nn
