#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "grad_support.hpp"
#include "oracles.hpp"
#include "samediff/imitation.hpp"
#include "samediff/nn/checkpoint.hpp"
#include "samediff/nn/distributions.hpp"
#include "samediff/ppo.hpp"

using namespace samediff;
using nn::Tensor;
using nn::Var;
using oracle::DParams;
using oracle::DTensor;

using namespace grad_support;

// --- Layer gradients ---

TEST(Gradients, Linear) {
  Rng rng(1);
  Var x(random_tensor({3, 5}, rng), true), w(random_tensor({5, 4}, rng), true), b(random_tensor({4}, rng), true);
  const auto wt = random_weights(12, rng);
  nn::backward(weighted(nn::linear(x, w, b), wt));
  const DParams p = {DTensor(x.value()), DTensor(w.value()), DTensor(b.value())};
  const auto r = oracle::finite_difference(
      [&](const DParams& q) { return weighted(oracle::linear(q[0], q[1], q[2]), wt); }, p,
      grads_of({x, w, b}), 50, rng);
  EXPECT_LT(r.max_rel_error, kGradTolerance);
}

TEST(Gradients, ConvStrided) {
  Rng rng(2);
  Var x(random_tensor({2, 11, 9, 3}, rng), true), w(random_tensor({5 * 5 * 3, 4}, rng, 0.3), true),
      b(random_tensor({4}, rng), true);
  const Var y = nn::conv2d(x, w, b, 5, 2);
  ASSERT_EQ(y.shape(), (std::vector<int>{2, 4, 3, 4}));
  const auto wt = random_weights(y.value().size(), rng);
  nn::backward(weighted(y, wt));
  const DParams p = {DTensor(x.value()), DTensor(w.value()), DTensor(b.value())};
  // Forward values agree too.
  const DTensor ref = oracle::conv(p[0], p[1], p[2], 5, 2);
  for (std::size_t i = 0; i < ref.v.size(); ++i) ASSERT_NEAR(y.value().data[i], ref.v[i], 1e-4);
  const auto r = oracle::finite_difference(
      [&](const DParams& q) { return weighted(oracle::conv(q[0], q[1], q[2], 5, 2), wt); }, p,
      grads_of({x, w, b}), 50, rng);
  EXPECT_LT(r.max_rel_error, kGradTolerance);
}

TEST(Gradients, LeakyRelu) {
  Rng rng(3);
  Tensor t = random_tensor({40}, rng);
  for (auto& v : t.data)
    if (std::abs(v) < 0.05f) v = 0.5f;  // keep FD away from the kink
  Var x(t, true);
  const auto wt = random_weights(40, rng);
  nn::backward(weighted(nn::leaky_relu(x, 0.01f), wt));
  const auto r = oracle::finite_difference(
      [&](const DParams& q) { return weighted(oracle::leaky(q[0], 0.01), wt); }, {DTensor(x.value())},
      grads_of({x}), 40, rng);
  EXPECT_LT(r.max_rel_error, kGradTolerance);
}

TEST(Gradients, SoftmaxCrossEntropy) {
  Rng rng(4);
  Var x(random_tensor({6, 7}, rng, 2.0), true);
  const std::vector<int> idx = {0, 3, 6, 2, 2, 5};
  nn::backward(nn::scale(nn::mean(nn::gather_cols(nn::log_softmax(x), idx)), -1.0f));
  const auto r = oracle::finite_difference(
      [&](const DParams& q) {
        const DTensor lp = oracle::log_softmax(q[0]);
        double s = 0;
        for (int i = 0; i < 6; ++i) s -= lp.v[i * 7 + idx[i]];
        return s / 6;
      },
      {DTensor(x.value())}, grads_of({x}), 42, rng);
  EXPECT_LT(r.max_rel_error, kGradTolerance);
}

TEST(Gradients, ValueSquaredError) {
  Rng rng(5);
  Var v(random_tensor({9}, rng), true);
  const Tensor target = random_tensor({9}, rng);
  nn::backward(nn::mean(nn::square(nn::sub(v, Var(target)))));
  for (int i = 0; i < 9; ++i) EXPECT_NEAR(v.grad().data[i], 2.0 * (v.value().data[i] - target.data[i]) / 9, 1e-6);
}

TEST(Gradients, ElementwiseOps) {
  Rng rng(6);
  Var a(random_tensor({20}, rng), true), b(random_tensor({20}, rng), true);
  const auto w1 = random_weights(20, rng), w2 = random_weights(20, rng), w3 = random_weights(20, rng);
  Var loss = nn::add(weighted(nn::softplus(a), w1), weighted(nn::sigmoid(nn::mul(a, b)), w2));
  loss = nn::add(loss, weighted(nn::log(nn::add_scalar(nn::exp(b), 1.0f)), w3));
  nn::backward(loss);
  const auto r = oracle::finite_difference(
      [&](const DParams& q) {
        double s = 0;
        for (int i = 0; i < 20; ++i) {
          const double x = q[0].v[i], y = q[1].v[i];
          s += w1[i] * oracle::softplus(x) + w2[i] / (1 + std::exp(-x * y)) + w3[i] * std::log(std::exp(y) + 1);
        }
        return s;
      },
      {DTensor(a.value()), DTensor(b.value())}, grads_of({a, b}), 40, rng);
  EXPECT_LT(r.max_rel_error, kGradTolerance);
}

TEST(Gradients, ClampAndMinimumRouteToTheActiveBranch) {
  Var a(Tensor({4}, {0.5f, 1.0f, 1.5f, 2.5f}), true);
  Var b(Tensor({4}, {1.0f, 0.0f, 2.0f, 1.9f}), true);
  nn::backward(nn::sum(nn::minimum(nn::clamp(a, 0.8f, 2.0f), b)));
  // clamp passes gradient only inside (0.8, 2); minimum picks the smaller.
  EXPECT_EQ(std::vector<float>(a.grad().data.begin(), a.grad().data.end()), (std::vector<float>{0, 0, 1, 0}));
  EXPECT_EQ(std::vector<float>(b.grad().data.begin(), b.grad().data.end()), (std::vector<float>{0, 1, 0, 1}));
}

TEST(Gradients, NonFiniteLossThrows) {
  Var a(Tensor({1}, {-1.0f}), true);
  EXPECT_THROW(nn::backward(nn::log(a)), nn::NumericalError);
}

// --- Whole-network gradients against the double-precision reference ---

TEST(Gradients, PolicyNetworkPPOLoss) {
  Rng rng(7);
  const auto shape = small_shape(6, 5);
  const nn::PolicyValueNet net(shape, rng);
  const int n = 6;
  UpdateBatch mb;
  mb.obs = kink_free_obs(to_dparams(net.parameters()), shape, n, rng);
  PPOConfig cfg;
  cfg.epsilon = 0.2f;
  cfg.beta = 0.05f;
  cfg.value_coef = 0.5f;
  const auto out0 = net.forward(mb.obs);
  const auto logp0 = nn::log_softmax(out0.logits);
  for (int i = 0; i < n; ++i) {
    mb.actions.push_back(i % 5);
    // Old policy a little away from the current one; some ratios clip.
    mb.old_log_probs.push_back(logp0.value().data[i * 5 + i % 5] + static_cast<float>(rng.uniform(-0.4, 0.4)));
    mb.advantages.push_back(static_cast<float>(rng.normal()));
    mb.returns.push_back(static_cast<float>(rng.normal()));
  }
  const auto params = net.parameters();
  zero_grads(params);
  const auto loss = ppo_loss(net, mb, cfg);
  nn::backward(loss.total);

  const DTensor frames(mb.obs.frames), hist(mb.obs.history);
  auto ref = [&](const DParams& q) {
    const auto o = oracle::policy_forward(q, frames, hist);
    const DTensor lp = oracle::log_softmax(o.logits);
    double pol = 0, val = 0, ent = 0;
    for (int i = 0; i < n; ++i) {
      const double ratio = std::exp(lp.v[i * 5 + mb.actions[i]] - mb.old_log_probs[i]);
      const double adv = mb.advantages[i];
      const double clipped = std::clamp(ratio, 1.0 - cfg.epsilon, 1.0 + cfg.epsilon);
      pol -= std::min(ratio * adv, clipped * adv);
      val += std::pow(o.values[i] - mb.returns[i], 2);
      for (int j = 0; j < 5; ++j) ent -= std::exp(lp.v[i * 5 + j]) * lp.v[i * 5 + j];
    }
    return pol / n + cfg.value_coef * val / n - cfg.beta * ent / n;
  };
  const DParams dp = to_dparams(params);
  EXPECT_NEAR(loss.total.item(), ref(dp), 1e-4);
  const auto r = oracle::finite_difference(ref, dp, grads_of(params), 50, rng);
  EXPECT_EQ(r.checked, 50);
  EXPECT_LT(r.max_rel_error, kGradTolerance);
}

TEST(Gradients, PolicyNetworkBCLoss) {
  Rng rng(8);
  const auto shape = small_shape(0, 4);
  const nn::PolicyValueNet net(shape, rng);
  const auto obs = kink_free_obs(to_dparams(net.parameters()), shape, 5, rng);
  const std::vector<int> actions = {0, 1, 3, 3, 2};
  const auto params = net.parameters();
  zero_grads(params);
  const Var loss = bc_loss(net, obs, actions);
  nn::backward(loss);
  const DTensor frames(obs.frames), hist(obs.history);
  auto ref = [&](const DParams& q) {
    const auto o = oracle::policy_forward(q, frames, hist);
    double s = 0;
    for (int i = 0; i < 5; ++i) s += d_logsumexp_row(o.logits, i) - o.logits.v[i * 4 + actions[i]];
    return s / 5;
  };
  const DParams dp = to_dparams(params);
  EXPECT_NEAR(loss.item(), ref(dp), 1e-4);
  const auto r = oracle::finite_difference(ref, dp, grads_of(params), 50, rng);
  EXPECT_LT(r.max_rel_error, kGradTolerance);
  EXPECT_THROW(bc_loss(net, obs, {0, 1, 4, 0, 0}), std::out_of_range);
}

TEST(Gradients, DiscriminatorLogisticLoss) {
  Rng rng(9);
  const auto shape = small_shape(0, 1);
  const nn::Discriminator d(shape, rng);
  const auto demo = kink_free_obs(to_dparams(d.parameters()), shape, 4, rng).frames;
  const auto pol = kink_free_obs(to_dparams(d.parameters()), shape, 3, rng).frames;
  const auto params = d.parameters();
  zero_grads(params);
  const Var loss = nn::add(nn::mean(nn::softplus(nn::scale(d.forward(demo), -1.0f))),
                           nn::mean(nn::softplus(d.forward(pol))));
  nn::backward(loss);
  const DTensor fd(demo), fp(pol);
  auto ref = [&](const DParams& q) {
    double s = 0;
    const auto ld = oracle::discriminator_forward(q, fd), lp = oracle::discriminator_forward(q, fp);
    for (double x : ld) s += oracle::softplus(-x) / ld.size();
    for (double x : lp) s += oracle::softplus(x) / lp.size();
    return s;
  };
  const DParams dp = to_dparams(params);
  const double ref_loss = ref(dp);
  EXPECT_NEAR(loss.item(), ref_loss, 1e-4);
  const auto r = oracle::finite_difference(ref, dp, grads_of(params), 50, rng);
  EXPECT_LT(r.max_rel_error, kGradTolerance);

  // gail_update reports the same loss and, on Adam's first step, moves each
  // parameter against the sign of its gradient.
  std::vector<Tensor> before, grads;
  for (const auto& [name, v] : params) {
    before.push_back(v.value());
    grads.push_back(v.grad());
  }
  nn::Adam adam(params, {1e-3f});
  const auto st = gail_update(d, adam, pol, demo);
  EXPECT_NEAR(st.loss, ref_loss, 1e-4);
  int agree = 0, total = 0;
  for (std::size_t k = 0; k < params.size(); ++k)
    for (std::size_t i = 0; i < grads[k].size(); ++i) {
      if (std::abs(grads[k].data[i]) < 1e-5f) continue;
      const float delta = params[k].second.value().data[i] - before[k].data[i];
      agree += (delta < 0) == (grads[k].data[i] > 0);
      ++total;
    }
  EXPECT_GT(total, 100);
  EXPECT_EQ(agree, total);
}

// --- Network family ---

TEST(Networks, ParameterCountClosedForm) {
  for (const auto& s : {nn::NetShape{64, 64, 1, 112, 14}, nn::NetShape{84, 84, 4, 0, 12},
                        nn::NetShape{17, 17, 1, 3, 2}}) {
    const long long flat = s.flat();
    const long long conv = 25LL * s.channels * 16 + 16 + 25LL * 16 * 32 + 32;
    const long long dense = (flat + s.history) * 256 + 256 + 256LL * 256 + 256;
    const long long policy = conv + dense + 256LL * s.actions + s.actions + 256 + 1;
    EXPECT_EQ(nn::PolicyValueNet::parameter_count(s), static_cast<std::size_t>(policy));
    Rng rng(1);
    const nn::PolicyValueNet net(s, rng);
    std::size_t counted = 0;
    for (const auto& [name, v] : net.parameters()) counted += v.value().size();
    EXPECT_EQ(counted, static_cast<std::size_t>(policy));
    const long long disc = conv + flat * 128 + 128 + 128LL * 128 + 128 + 128 + 1;
    EXPECT_EQ(nn::Discriminator::parameter_count(s), static_cast<std::size_t>(disc));
  }
  // 64x64: 30x30 after the first conv, 13x13 after the second.
  const nn::NetShape s64{64, 64, 1, 0, 2};
  EXPECT_EQ(s64.conv1_h(), 30);
  EXPECT_EQ(s64.conv2_h(), 13);
  EXPECT_EQ(s64.flat(), 13 * 13 * 32);
}

TEST(Networks, ForwardMatchesReference) {
  Rng rng(10);
  const auto shape = small_shape(4, 6);
  const nn::PolicyValueNet net(shape, rng);
  const auto obs = random_obs(shape, 3, rng);
  const auto out = net.forward(obs);
  const auto ref = oracle::policy_forward(to_dparams(net.parameters()), DTensor(obs.frames), DTensor(obs.history));
  for (std::size_t i = 0; i < ref.logits.v.size(); ++i) EXPECT_NEAR(out.logits.value().data[i], ref.logits.v[i], 1e-4);
  for (std::size_t i = 0; i < ref.values.size(); ++i) EXPECT_NEAR(out.values.value().data[i], ref.values[i], 1e-4);
}

TEST(Networks, ZeroFinalLayersGiveUniformPolicyAndZeroValue) {
  Rng rng(11);
  const auto shape = small_shape(0, 7);
  const nn::PolicyValueNet net(shape, rng);
  auto params = net.parameters();
  for (std::size_t k = params.size() - 4; k < params.size(); ++k)
    std::fill(params[k].second.mutable_value().data.begin(), params[k].second.mutable_value().data.end(), 0.0f);
  const auto out = net.forward(random_obs(shape, 4, rng));
  for (int i = 0; i < 4; ++i) {
    const auto p = nn::softmax(nn::row(out.logits.value(), i));
    for (float v : p) EXPECT_NEAR(v, 1.0 / 7, 1e-7);
    EXPECT_EQ(out.values.value().data[i], 0.0f);
  }
}

TEST(Networks, TrainingIsBitwiseDeterministic) {
  auto run = [] {
    Rng rng(12);
    const auto shape = small_shape(2, 3);
    const nn::PolicyValueNet net(shape, rng);
    nn::Adam adam(net.parameters(), {1e-3f});
    const auto obs = random_obs(shape, 8, rng);
    const std::vector<int> actions = {0, 1, 2, 0, 1, 2, 0, 0};
    for (int step = 0; step < 100; ++step) {
      nn::backward(bc_loss(net, obs, actions));
      adam.step();
    }
    std::vector<float> flat;
    for (const auto& [name, v] : net.parameters())
      flat.insert(flat.end(), v.value().data.begin(), v.value().data.end());
    return flat;
  };
  EXPECT_EQ(run(), run());
}

TEST(Networks, OrthogonalInitIsOrthogonal) {
  Rng rng(13);
  const Tensor q = nn::orthogonal(20, 8, 2.0f, rng);
  for (int a = 0; a < 8; ++a)
    for (int b = 0; b < 8; ++b) {
      double dot = 0;
      for (int r = 0; r < 20; ++r) dot += q.data[r * 8 + a] * q.data[r * 8 + b];
      EXPECT_NEAR(dot, a == b ? 4.0 : 0.0, 1e-4);
    }
}

// --- Distributions ---

TEST(Distributions, UniformEntropyIsLogK) {
  for (int k : {2, 14, 194}) {
    const std::vector<float> logits(k, 0.3f);
    EXPECT_NEAR(nn::entropy(logits), std::log(k), 1e-5);
    EXPECT_NEAR(nn::log_prob(logits, k - 1), -std::log(k), 1e-5);
  }
}

TEST(Distributions, DominantLogitIsDeterministic) {
  std::vector<float> logits = {0.0f, 1e9f, -3.0f, 2.0f};
  EXPECT_NEAR(nn::entropy(logits), 0.0, 1e-6);
  EXPECT_EQ(nn::log_prob(logits, 1), 0.0f);
  EXPECT_TRUE(std::isfinite(nn::log_prob(logits, 0)));
  EXPECT_EQ(nn::argmax(logits), 1);
  Rng rng(14);
  for (int i = 0; i < 1000; ++i) EXPECT_EQ(nn::sample(logits, rng), 1);
}

TEST(Distributions, SampleFrequenciesWithinThreeSigma) {
  const std::vector<float> logits = {0.1f, -1.0f, 1.2f, 0.0f, -0.5f};
  const auto p = nn::softmax(logits);
  Rng rng(15);
  const int n = 100000;
  std::vector<int> counts(5);
  for (int i = 0; i < n; ++i) ++counts[nn::sample(logits, rng)];
  for (int j = 0; j < 5; ++j) {
    const double sigma = std::sqrt(n * p[j] * (1 - p[j]));
    EXPECT_NEAR(counts[j], n * p[j], 3 * sigma) << j;
  }
}

TEST(Distributions, SoftmaxNormalizedAndShiftInvariant) {
  Rng rng(16);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<float> logits(9);
    for (auto& v : logits) v = static_cast<float>(rng.uniform(-20, 20));
    const auto p = nn::softmax(logits);
    EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-5);
    auto shifted = logits;
    for (auto& v : shifted) v += 37.0f;
    const auto q = nn::softmax(shifted);
    for (int j = 0; j < 9; ++j) EXPECT_NEAR(p[j], q[j], 1e-5);
    const auto lp = nn::log_softmax(logits);
    for (int j = 0; j < 9; ++j) EXPECT_NEAR(std::exp(lp[j]), p[j], 1e-5);
  }
  EXPECT_EQ(nn::argmax(std::vector<float>{1, 3, 3}), 1);
}

TEST(Distributions, MeanEntropyMatchesRowwise) {
  Rng rng(17);
  const Tensor logits = random_tensor({4, 6}, rng, 2.0);
  const Var e = nn::mean_entropy(nn::log_softmax(Var(logits)));
  double want = 0;
  for (int i = 0; i < 4; ++i) want += nn::entropy(nn::row(logits, i)) / 4;
  EXPECT_NEAR(e.item(), want, 1e-5);
}

// --- Optimizer and checkpoints ---

TEST(Adam, FirstStepMovesByLearningRateAndConverges) {
  Var x(Tensor({3}, {0.0f, 10.0f, -4.0f}), true);
  nn::Adam adam({{"x", x}}, {0.1f});
  nn::backward(nn::sum(nn::square(nn::add_scalar(x, -3.0f))));
  adam.step();
  EXPECT_NEAR(x.value().data[0], 0.1f, 1e-5);
  EXPECT_NEAR(x.value().data[1], 9.9f, 1e-5);
  EXPECT_NEAR(x.value().data[2], -3.9f, 1e-5);
  EXPECT_TRUE(x.grad().data.empty() || x.grad().data[0] == 0.0f);
  for (int i = 0; i < 2000; ++i) {
    nn::backward(nn::sum(nn::square(nn::add_scalar(x, -3.0f))));
    adam.step();
  }
  for (float v : x.value().data) EXPECT_NEAR(v, 3.0f, 1e-2);
  EXPECT_EQ(adam.step_count(), 2001);
}

TEST(Adam, NonFiniteGradientThrows) {
  Var x(Tensor({1}, {1.0f}), true);
  nn::Adam adam({{"x", x}});
  x.grad() = Tensor({1}, {std::nanf("")});
  EXPECT_THROW(adam.step(), nn::NumericalError);
}

TEST(Checkpoint, RoundTripsParametersAndOptimizerState) {
  Rng rng(18);
  const auto shape = small_shape(2, 3);
  const nn::PolicyValueNet a(shape, rng);
  nn::Adam adam_a(a.parameters());
  const auto obs = random_obs(shape, 4, rng);
  nn::backward(bc_loss(a, obs, {0, 1, 2, 0}));
  adam_a.step();

  nn::Checkpoint ck;
  ck.metadata = R"({"kind":"policy"})";
  nn::store_parameters(ck, "policy.", a.parameters());
  nn::store_optimizer(ck, "policy.", adam_a);
  const std::string bytes = nn::serialize_checkpoint(ck);
  EXPECT_EQ(bytes.substr(0, 8), "SAMEDIFF");
  const auto back = nn::deserialize_checkpoint(bytes);
  EXPECT_EQ(back, ck);

  Rng other(99);
  const nn::PolicyValueNet b(shape, other);
  nn::Adam adam_b(b.parameters());
  nn::load_parameters(back, "policy.", b.parameters());
  nn::load_optimizer(back, "policy.", adam_b);
  EXPECT_EQ(adam_b.step_count(), 1);
  // Continuing from the restored state gives the same next step.
  nn::backward(bc_loss(a, obs, {2, 2, 1, 0}));
  adam_a.step();
  nn::backward(bc_loss(b, obs, {2, 2, 1, 0}));
  adam_b.step();
  for (std::size_t k = 0; k < a.parameters().size(); ++k)
    EXPECT_EQ(a.parameters()[k].second.value().data, b.parameters()[k].second.value().data);

  const auto path = std::filesystem::temp_directory_path() / "samediff_test_ck.bin";
  nn::save_checkpoint(path.string(), ck);
  EXPECT_EQ(nn::load_checkpoint(path.string()), ck);
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsCorruptInput) {
  nn::Checkpoint ck;
  ck.tensors["w"] = Tensor({2, 2}, {1, 2, 3, 4});
  std::string bytes = nn::serialize_checkpoint(ck);
  EXPECT_THROW(nn::deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), std::runtime_error);
  bytes[0] = 'X';
  EXPECT_THROW(nn::deserialize_checkpoint(bytes), std::runtime_error);
  EXPECT_THROW(nn::deserialize_checkpoint(""), std::runtime_error);
  Rng rng(1);
  const nn::PolicyValueNet net(small_shape(0, 2), rng);
  EXPECT_THROW(nn::load_parameters(ck, "policy.", net.parameters()), std::exception);
}
