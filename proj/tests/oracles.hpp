#pragma once

// Independent reference implementations used as test oracles. Nothing here
// calls into the library code it checks.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <set>
#include <vector>

#include "samediff/nn/autograd.hpp"
#include "samediff/objects.hpp"
#include "samediff/rng.hpp"

namespace oracle {

using Mat3 = std::array<std::array<int, 3>, 3>;
using Cell = samediff::Cell;

// All signed permutation matrices with determinant +1, by enumeration.
inline std::vector<Mat3> proper_rotations() {
  std::vector<Mat3> out;
  std::array<int, 3> perm = {0, 1, 2};
  do {
    for (int signs = 0; signs < 8; ++signs) {
      Mat3 m{};
      for (int r = 0; r < 3; ++r) m[r][perm[r]] = (signs >> r) & 1 ? -1 : 1;
      const int det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
                      m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
                      m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
      if (det == 1) out.push_back(m);
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return out;
}

inline std::set<Cell> normalized(const std::vector<Cell>& cells, const Mat3& m) {
  std::vector<Cell> r;
  for (const auto& c : cells) {
    Cell o{};
    for (int i = 0; i < 3; ++i) o[i] = m[i][0] * c[0] + m[i][1] * c[1] + m[i][2] * c[2];
    r.push_back(o);
  }
  Cell lo = r.front();
  for (const auto& c : r)
    for (int i = 0; i < 3; ++i) lo[i] = std::min(lo[i], c[i]);
  std::set<Cell> s;
  for (auto c : r) {
    for (int i = 0; i < 3; ++i) c[i] -= lo[i];
    s.insert(c);
  }
  return s;
}

// Exhaustive: some proper rotation maps b onto a, up to translation.
inline bool congruent(const std::vector<Cell>& a, const std::vector<Cell>& b) {
  if (a.size() != b.size()) return false;
  const Mat3 id{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
  const auto target = normalized(a, id);
  for (const auto& m : proper_rotations())
    if (normalized(b, m) == target) return true;
  return false;
}

// Angle of a proper rotation in degrees from its trace, computed in double.
inline int rotation_angle(const Mat3& m) {
  const double tr = m[0][0] + m[1][1] + m[2][2];
  return static_cast<int>(std::lround(std::acos(std::clamp((tr - 1.0) / 2.0, -1.0, 1.0)) * 180.0 / M_PI));
}

// A_t = sum_k (gamma lambda)^k delta_{t+k}, truncated at episode ends.
inline std::vector<double> gae_bruteforce(const std::vector<double>& r, const std::vector<double>& v,
                                          const std::vector<bool>& done, double gamma,
                                          double lambda, double bootstrap) {
  const std::size_t n = r.size();
  std::vector<double> delta(n);
  for (std::size_t t = 0; t < n; ++t) {
    const double next = t + 1 < n ? v[t + 1] : bootstrap;
    delta[t] = r[t] + gamma * next * (done[t] ? 0.0 : 1.0) - v[t];
  }
  std::vector<double> adv(n, 0.0);
  for (std::size_t t = 0; t < n; ++t) {
    double w = 1.0;
    for (std::size_t k = t; k < n; ++k) {
      adv[t] += w * delta[k];
      if (done[k]) break;
      w *= gamma * lambda;
    }
  }
  return adv;
}

// --- Double-precision reference forward passes ---

struct DTensor {
  std::vector<int> shape;
  std::vector<double> v;
  DTensor() = default;
  explicit DTensor(const samediff::nn::Tensor& t) : shape(t.shape), v(t.data.begin(), t.data.end()) {}
  DTensor(std::vector<int> s, double fill = 0.0) : shape(std::move(s)) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    v.assign(n, fill);
  }
};

// x [N, in] w [in, out] b [out]
inline DTensor linear(const DTensor& x, const DTensor& w, const DTensor& b) {
  const int n = x.shape[0], in = w.shape[0], out = w.shape[1];
  DTensor y({n, out});
  for (int i = 0; i < n; ++i)
    for (int o = 0; o < out; ++o) {
      double s = b.v[o];
      for (int k = 0; k < in; ++k) s += x.v[i * in + k] * w.v[k * out + o];
      y.v[i * out + o] = s;
    }
  return y;
}

// Direct NHWC valid convolution; w [K*K*C, F] with (kh, kw, c) row order.
inline DTensor conv(const DTensor& x, const DTensor& w, const DTensor& b, int k, int stride) {
  const int n = x.shape[0], h = x.shape[1], wd = x.shape[2], c = x.shape[3];
  const int f = w.shape[1];
  const int oh = (h - k) / stride + 1, ow = (wd - k) / stride + 1;
  DTensor y({n, oh, ow, f});
  for (int i = 0; i < n; ++i)
    for (int r = 0; r < oh; ++r)
      for (int q = 0; q < ow; ++q)
        for (int o = 0; o < f; ++o) {
          double s = b.v[o];
          for (int kh = 0; kh < k; ++kh)
            for (int kw = 0; kw < k; ++kw)
              for (int ch = 0; ch < c; ++ch)
                s += x.v[((static_cast<std::size_t>(i) * h + r * stride + kh) * wd + q * stride + kw) * c + ch] *
                     w.v[((kh * k + kw) * c + ch) * f + o];
          y.v[((static_cast<std::size_t>(i) * oh + r) * ow + q) * f + o] = s;
        }
  return y;
}

inline DTensor leaky(DTensor x, double slope) {
  for (auto& e : x.v) e = e > 0 ? e : slope * e;
  return x;
}

inline DTensor flatten(DTensor x) {
  int rest = 1;
  for (std::size_t i = 1; i < x.shape.size(); ++i) rest *= x.shape[i];
  x.shape = {x.shape[0], rest};
  return x;
}

inline DTensor concat(const DTensor& a, const DTensor& b) {
  const int n = a.shape[0], p = a.shape[1], q = b.shape[1];
  DTensor y({n, p + q});
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < p; ++j) y.v[i * (p + q) + j] = a.v[i * p + j];
    for (int j = 0; j < q; ++j) y.v[i * (p + q) + p + j] = b.v[i * q + j];
  }
  return y;
}

inline DTensor log_softmax(const DTensor& x) {
  const int n = x.shape[0], k = x.shape[1];
  DTensor y({n, k});
  for (int i = 0; i < n; ++i) {
    double m = -1e300;
    for (int j = 0; j < k; ++j) m = std::max(m, x.v[i * k + j]);
    double s = 0;
    for (int j = 0; j < k; ++j) s += std::exp(x.v[i * k + j] - m);
    for (int j = 0; j < k; ++j) y.v[i * k + j] = x.v[i * k + j] - m - std::log(s);
  }
  return y;
}

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

// Parameters by name in the order a network reports them.
using DParams = std::vector<DTensor>;

// Encoder + dense stack matching the library's fixed family. Returns the
// last hidden layer ([N, hidden]) given params in network order starting at
// conv1.w; `next` is advanced past the consumed tensors.
inline DTensor encoder_trunk(const DParams& p, std::size_t& next, const DTensor& frames,
                             const DTensor* history, double slope = 0.01) {
  DTensor h = leaky(conv(frames, p[next], p[next + 1], 5, 2), slope);
  h = leaky(conv(h, p[next + 2], p[next + 3], 5, 2), slope);
  h = flatten(h);
  if (history && history->shape[1] > 0) h = concat(h, *history);
  h = leaky(linear(h, p[next + 4], p[next + 5]), slope);
  h = leaky(linear(h, p[next + 6], p[next + 7]), slope);
  next += 8;
  return h;
}

struct DPolicyOut {
  DTensor logits;
  std::vector<double> values;
};

inline DPolicyOut policy_forward(const DParams& p, const DTensor& frames, const DTensor& history) {
  std::size_t next = 0;
  const DTensor h = encoder_trunk(p, next, frames, &history);
  DPolicyOut out;
  out.logits = linear(h, p[next], p[next + 1]);
  const DTensor v = linear(h, p[next + 2], p[next + 3]);
  out.values = v.v;
  return out;
}

inline std::vector<double> discriminator_forward(const DParams& p, const DTensor& frames) {
  std::size_t next = 0;
  const DTensor h = encoder_trunk(p, next, frames, nullptr);
  return linear(h, p[next], p[next + 1]).v;
}

// --- Finite differences ---

struct GradCheck {
  double max_rel_error = 0.0;
  int checked = 0;
};

// Central differences (step h) of a double-precision loss over `count`
// random parameter entries, compared to the analytic float gradients. The
// step is small because a leaky unit near zero turns any larger step into a
// kink crossing.
// Relative error is |a - n| / max(|a|, |n|, floor).
inline GradCheck finite_difference(const std::function<double(const DParams&)>& loss,
                                   const DParams& params,
                                   const std::vector<const samediff::nn::Tensor*>& analytic,
                                   int count, samediff::Rng& rng, double h = 1e-6,
                                   double floor = 1e-6) {
  GradCheck out;
  std::size_t total = 0;
  for (const auto& p : params) total += p.v.size();
  for (int c = 0; c < count; ++c) {
    std::size_t flat = rng.uniform_int(static_cast<std::uint64_t>(total));
    std::size_t which = 0;
    while (flat >= params[which].v.size()) flat -= params[which++].v.size();
    DParams plus = params, minus = params;
    plus[which].v[flat] += h;
    minus[which].v[flat] -= h;
    const double numeric = (loss(plus) - loss(minus)) / (2 * h);
    const auto& g = *analytic[which];
    const double a = g.data.empty() ? 0.0 : g.data[flat];
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
    out.max_rel_error = std::max(out.max_rel_error, rel);
    ++out.checked;
  }
  return out;
}

}  // namespace oracle
