#include "samediff/ppo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "samediff/nn/distributions.hpp"

namespace samediff {

using nn::Tensor;
using nn::Var;

void PPOConfig::validate() const {
  if (batch_size <= 0 || buffer_size <= 0 || buffer_size % batch_size != 0)
    throw std::invalid_argument("PPOConfig: buffer_size must be a positive multiple of batch_size");
  if (!(gamma > 0.0f && gamma <= 1.0f)) throw std::invalid_argument("PPOConfig: gamma in (0, 1]");
  if (!(lambda >= 0.0f && lambda <= 1.0f)) throw std::invalid_argument("PPOConfig: lambda in [0, 1]");
  if (!(epsilon > 0.0f)) throw std::invalid_argument("PPOConfig: epsilon must be positive");
  if (!(lr > 0.0f)) throw std::invalid_argument("PPOConfig: lr must be positive");
  if (beta < 0.0f || reward_strength < 0.0f || value_coef < 0.0f)
    throw std::invalid_argument("PPOConfig: coefficients must be non-negative");
  if (num_epoch <= 0) throw std::invalid_argument("PPOConfig: num_epoch must be positive");
  if (max_steps <= 0) throw std::invalid_argument("PPOConfig: max_steps must be positive");
}

// --- SameDiffTask ---

SameDiffTask::SameDiffTask(Environment env, TrialSource trials)
    : env_(std::move(env)), trials_(std::move(trials)) {}

void SameDiffTask::reset(Rng& rng) { state_ = env_.reset(trials_(rng)); }

void SameDiffTask::observe(int channels, float* frame, float* history) const {
  const Observation obs = env_.observe(state_);
  nn::frame_to_input(obs.frame, channels, frame);
  std::copy(obs.history.begin(), obs.history.end(), history);
}

TaskStep SameDiffTask::step(int action) {
  auto r = env_.step(state_, env_.decode_policy_action(action));
  state_ = std::move(r.state);
  return {r.reward, r.done, state_.outcome == Outcome::Correct};
}

// --- GAE ---

GaeResult compute_gae(const std::vector<float>& rewards, const std::vector<float>& values,
                      const std::vector<bool>& dones, float gamma, float lambda,
                      float bootstrap_value) {
  const std::size_t n = rewards.size();
  if (n == 0) throw std::invalid_argument("compute_gae: empty trajectory");
  if (values.size() != n || dones.size() != n)
    throw std::invalid_argument("compute_gae: length mismatch");
  GaeResult g;
  g.advantages.assign(n, 0.0f);
  g.returns.assign(n, 0.0f);
  float next_adv = 0.0f;
  float next_value = bootstrap_value;
  for (std::size_t k = n; k-- > 0;) {
    const float nonterminal = dones[k] ? 0.0f : 1.0f;
    const float delta = rewards[k] + gamma * next_value * nonterminal - values[k];
    next_adv = delta + gamma * lambda * nonterminal * next_adv;
    g.advantages[k] = next_adv;
    g.returns[k] = next_adv + values[k];
    next_value = values[k];
  }
  return g;
}

void normalize(std::vector<float>& v) {
  if (v.empty()) return;
  double mean = 0.0;
  for (float x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (float x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(v.size());
  const double sd = std::max(std::sqrt(var), 1e-8);
  for (auto& x : v) x = static_cast<float>((x - mean) / sd);
}

// --- Batches ---

namespace {

void copy_rows(const Tensor& src, Tensor& dst, const std::vector<int>& rows) {
  const std::size_t stride = src.rank() ? src.size() / static_cast<std::size_t>(src.dim(0)) : 0;
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(src.ptr() + static_cast<std::size_t>(rows[i]) * stride, stride,
                dst.ptr() + i * stride);
}

Tensor with_rows(const Tensor& t, int n) {
  std::vector<int> shape = t.shape;
  shape[0] = n;
  return Tensor(shape);
}

}  // namespace

UpdateBatch UpdateBatch::select(const std::vector<int>& rows) const {
  UpdateBatch out;
  const int n = static_cast<int>(rows.size());
  out.obs.frames = with_rows(obs.frames, n);
  out.obs.history = with_rows(obs.history, n);
  copy_rows(obs.frames, out.obs.frames, rows);
  copy_rows(obs.history, out.obs.history, rows);
  for (int r : rows) {
    out.actions.push_back(actions[r]);
    out.old_log_probs.push_back(old_log_probs[r]);
    out.advantages.push_back(advantages[r]);
    out.returns.push_back(returns[r]);
  }
  return out;
}

UpdateBatch make_update_batch(const Rollout& r, const PPOConfig& cfg) {
  const int n = r.size();
  UpdateBatch b;
  b.obs = r.obs;
  b.actions = r.actions;
  b.old_log_probs = r.log_probs;
  b.advantages.assign(n, 0.0f);
  b.returns.assign(n, 0.0f);
  const int workers = static_cast<int>(r.bootstrap.size());
  std::vector<std::vector<int>> streams(workers);
  for (int i = 0; i < n; ++i) streams.at(r.worker[i]).push_back(i);
  for (int w = 0; w < workers; ++w) {
    const auto& idx = streams[w];
    if (idx.empty()) continue;
    std::vector<float> rew, val;
    std::vector<bool> done;
    for (int i : idx) {
      rew.push_back(r.rewards[i]);
      val.push_back(r.values[i]);
      done.push_back(r.dones[i]);
    }
    const auto g = compute_gae(rew, val, done, cfg.gamma, cfg.lambda, r.bootstrap[w]);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      b.advantages[idx[k]] = g.advantages[k];
      b.returns[idx[k]] = g.returns[k];
    }
  }
  if (cfg.normalize_advantages) normalize(b.advantages);
  return b;
}

// --- Loss and update ---

PPOLoss ppo_loss(const nn::PolicyValueNet& net, const UpdateBatch& mb, const PPOConfig& cfg) {
  const int n = mb.size();
  const auto out = net.forward(mb.obs);
  Var logp_all = nn::log_softmax(out.logits);
  Var logp = nn::gather_cols(logp_all, mb.actions);
  Var ratio = nn::exp(nn::sub(logp, Var(Tensor({n}, mb.old_log_probs))));
  const Tensor adv({n}, mb.advantages);
  Var surr1 = nn::mul_const(ratio, adv);
  Var surr2 = nn::mul_const(nn::clamp(ratio, 1.0f - cfg.epsilon, 1.0f + cfg.epsilon), adv);
  PPOLoss loss;
  loss.policy = nn::scale(nn::mean(nn::minimum(surr1, surr2)), -1.0f);
  loss.value = nn::mean(nn::square(nn::sub(out.values, Var(Tensor({n}, mb.returns)))));
  loss.entropy = nn::mean_entropy(logp_all);
  loss.total = nn::add(nn::add(loss.policy, nn::scale(loss.value, cfg.value_coef)),
                       nn::scale(loss.entropy, -cfg.beta));
  int clipped = 0;
  for (float r : ratio.value().data)
    if (std::abs(r - 1.0f) > cfg.epsilon) ++clipped;
  loss.clip_fraction = n ? static_cast<double>(clipped) / n : 0.0;
  return loss;
}

UpdateStats ppo_update(const nn::PolicyValueNet& net, nn::Adam& adam, const UpdateBatch& batch,
                       const PPOConfig& cfg, Rng& rng, const AuxLoss* aux) {
  const int n = batch.size();
  if (n == 0) throw std::invalid_argument("ppo_update: empty batch");
  UpdateStats stats;
  std::vector<int> order(n);
  for (int epoch = 0; epoch < cfg.num_epoch; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order.begin(), order.end());
    for (int start = 0; start < n; start += cfg.batch_size) {
      const int end = std::min(n, start + cfg.batch_size);
      const std::vector<int> rows(order.begin() + start, order.begin() + end);
      const UpdateBatch mb = batch.select(rows);
      PPOLoss loss = ppo_loss(net, mb, cfg);
      Var total = loss.total;
      if (aux && aux->loss && aux->weight != 0.0f) {
        Var extra = aux->loss();
        if (extra.defined()) {
          stats.aux_loss += extra.item();
          total = nn::add(total, nn::scale(extra, aux->weight));
        }
      }
      if (!std::isfinite(total.item()))
        throw nn::NumericalError("non-finite PPO loss at epoch " + std::to_string(epoch));
      adam.zero_grad();
      nn::backward(total);
      adam.step();
      stats.policy_loss += loss.policy.item();
      stats.value_loss += loss.value.item();
      stats.entropy += loss.entropy.item();
      stats.clip_fraction += loss.clip_fraction;
      ++stats.minibatches;
    }
  }
  const double m = stats.minibatches;
  stats.policy_loss /= m;
  stats.value_loss /= m;
  stats.entropy /= m;
  stats.clip_fraction /= m;
  stats.aux_loss /= m;
  return stats;
}

// --- Curves ---

std::string curve_csv_header() { return "episode,mean_reward,entropy,clip_fraction,lesson_index"; }

std::string curve_to_csv(const std::vector<CurvePoint>& curve) {
  std::ostringstream ss;
  ss << curve_csv_header() << '\n';
  ss.precision(6);
  for (const auto& p : curve)
    ss << p.episode << ',' << p.mean_reward << ',' << p.entropy << ',' << p.clip_fraction << ','
       << p.lesson_index << '\n';
  return ss.str();
}

std::string_view to_string(StopReason r) {
  switch (r) {
    case StopReason::None: return "none";
    case StopReason::Plateau: return "plateau";
    case StopReason::MaxSteps: return "max_steps";
    case StopReason::EpisodeBudget: return "episode_budget";
    case StopReason::Forgetting: return "forgetting";
    case StopReason::CurriculumFinished: return "curriculum_finished";
    case StopReason::CurriculumStalled: return "curriculum_stalled";
    case StopReason::Diverged: return "diverged";
    case StopReason::Stuck: return "stuck";
  }
  return "unknown";
}

bool PlateauTracker::update(double block_mean, long long episode) {
  if (!started || block_mean > best + tolerance) {
    started = true;
    best = block_mean;
    best_episode = episode;
    return false;
  }
  return window > 0 && episode - best_episode >= window;
}

// --- Training loop ---

namespace {

struct Worker {
  std::unique_ptr<Task> task;
  Rng rng{0};
  double episode_return = 0.0;
};

void fill_observations(std::vector<Worker>& workers, int channels, nn::ObsBatch& batch) {
  const int n = static_cast<int>(workers.size());
  const auto& t = *workers[0].task;
  batch.frames = Tensor({n, t.image_height(), t.image_width(), channels});
  batch.history = Tensor({n, t.history_size()});
  const std::size_t fstride = batch.frames.size() / n;
  const std::size_t hstride = batch.history.size() / n;
  for (int i = 0; i < n; ++i)
    workers[i].task->observe(channels, batch.frames.ptr() + i * fstride,
                             batch.history.ptr() + i * hstride);
}

}  // namespace

TrainResult train_loop(const TaskFactory& factory, nn::PolicyValueNet& net, nn::Adam& adam,
                       const TrainOptions& opt, const TrainHooks& hooks) {
  opt.ppo.validate();
  if (opt.n_envs <= 0) throw std::invalid_argument("train_loop: n_envs must be positive");
  if (opt.stop.log_every <= 0) throw std::invalid_argument("train_loop: log_every must be positive");

  std::vector<Worker> workers(opt.n_envs);
  for (int i = 0; i < opt.n_envs; ++i) {
    workers[i].task = factory(i);
    if (!workers[i].task) throw std::runtime_error("train_loop: task factory returned null");
    workers[i].rng = Rng(Rng::derive_seed(opt.seed, "env/" + std::to_string(i)));
  }
  const nn::NetShape shape = workers[0].task->net_shape(opt.channels);
  if (!(shape == net.shape()))
    throw std::invalid_argument("train_loop: network shape does not match the task");
  for (auto& w : workers) w.task->reset(w.rng);

  Rng policy_rng(Rng::derive_seed(opt.seed, "policy"));
  Rng update_rng(Rng::derive_seed(opt.seed, "update"));
  PlateauTracker plateau{opt.stop.plateau_tolerance, opt.stop.plateau_window};
  TrainResult result;
  std::vector<double> block_means;
  double block_sum = 0.0;
  int block_count = 0;
  const std::size_t fstride = static_cast<std::size_t>(shape.height) * shape.width * shape.channels;
  const std::size_t hstride = static_cast<std::size_t>(shape.history);

  // Returns a stop reason when this finished episode ends the run.
  auto finish_episode = [&](double ret, bool correct) -> std::optional<StopReason> {
    ++result.episodes;
    if (hooks.on_episode) hooks.on_episode(ret, correct);
    block_sum += ret;
    if (++block_count == opt.stop.log_every) {
      CurvePoint p;
      p.episode = result.episodes;
      p.mean_reward = block_sum / block_count;
      p.entropy = result.last_update.entropy;
      p.clip_fraction = result.last_update.clip_fraction;
      p.lesson_index = hooks.lesson_index ? hooks.lesson_index() : 0;
      result.curve.push_back(p);
      block_means.push_back(p.mean_reward);
      if (hooks.on_log) hooks.on_log(p);
      block_sum = 0.0;
      block_count = 0;
      if (p.mean_reward > result.best_mean_reward) {
        result.best_mean_reward = p.mean_reward;
        result.best = nn::Checkpoint{};
        nn::store_parameters(result.best, "policy.", net.parameters());
      }
      if (opt.stop.forgetting && forgetting_detector(block_means, opt.stop.forgetting_cfg))
        return StopReason::Forgetting;
      if (result.episodes >= opt.stop.stuck_fraction * opt.stop.episode_budget &&
          p.mean_reward <= opt.stop.stuck_reward)
        return StopReason::Stuck;
      if (plateau.update(p.mean_reward, result.episodes)) return StopReason::Plateau;
    }
    if (hooks.should_stop)
      if (auto r = hooks.should_stop()) return r;
    if (result.episodes >= opt.stop.episode_budget) return StopReason::EpisodeBudget;
    return std::nullopt;
  };

  nn::ObsBatch tick_obs;
  std::optional<StopReason> stop;
  while (!stop) {
    Rollout r;
    const int buffer = opt.ppo.buffer_size;
    r.obs.frames = Tensor({buffer, shape.height, shape.width, shape.channels});
    r.obs.history = Tensor({buffer, shape.history});
    r.bootstrap.assign(opt.n_envs, 0.0f);
    int filled = 0;
    while (filled < buffer && !stop) {
      fill_observations(workers, opt.channels, tick_obs);
      nn::PolicyOutput out;
      {
        nn::NoGradGuard no_grad;
        out = net.forward(tick_obs);
      }
      for (int i = 0; i < opt.n_envs && filled < buffer && !stop; ++i) {
        const auto logits = nn::row(out.logits.value(), i);
        const int action = nn::sample(logits, policy_rng);
        std::copy_n(tick_obs.frames.ptr() + i * fstride, fstride,
                    r.obs.frames.ptr() + static_cast<std::size_t>(filled) * fstride);
        std::copy_n(tick_obs.history.ptr() + i * hstride, hstride,
                    r.obs.history.ptr() + static_cast<std::size_t>(filled) * hstride);
        const TaskStep s = workers[i].task->step(action);
        r.worker.push_back(i);
        r.actions.push_back(action);
        r.env_rewards.push_back(static_cast<float>(s.reward));
        r.rewards.push_back(static_cast<float>(s.reward) * opt.ppo.reward_strength);
        r.dones.push_back(s.done);
        r.values.push_back(out.values.value().data[i]);
        r.log_probs.push_back(nn::log_prob(logits, action));
        ++filled;
        ++result.steps;
        workers[i].episode_return += s.reward;
        if (s.done) {
          const double ret = workers[i].episode_return;
          workers[i].episode_return = 0.0;
          workers[i].task->reset(workers[i].rng);
          stop = finish_episode(ret, s.correct);
        }
        if (!stop && result.steps >= opt.ppo.max_steps) stop = StopReason::MaxSteps;
      }
    }
    if (stop) break;
    {
      fill_observations(workers, opt.channels, tick_obs);
      nn::NoGradGuard no_grad;
      const auto out = net.forward(tick_obs);
      for (int i = 0; i < opt.n_envs; ++i) r.bootstrap[i] = out.values.value().data[i];
    }
    if (hooks.on_rollout) hooks.on_rollout(r);
    const UpdateBatch batch = make_update_batch(r, opt.ppo);
    try {
      result.last_update = ppo_update(net, adam, batch, opt.ppo, update_rng,
                                      hooks.aux.loss ? &hooks.aux : nullptr);
    } catch (const nn::NumericalError& e) {
      stop = StopReason::Diverged;
      result.failure = e.what();
    }
  }
  result.reason = *stop;
  if (result.reason == StopReason::Diverged || result.reason == StopReason::Stuck) {
    result.failed = true;
    if (result.failure.empty()) {
      result.failure = "mean reward at or below " + std::to_string(opt.stop.stuck_reward) +
                       " after " + std::to_string(result.episodes) + " episodes";
    }
  }
  if (result.best.tensors.empty()) nn::store_parameters(result.best, "policy.", net.parameters());
  return result;
}

}  // namespace samediff
