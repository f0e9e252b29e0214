#pragma once

// Rollout collection, generalized advantage estimation, the clipped
// surrogate update, and the training loop with its stop rules.

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "samediff/curriculum.hpp"
#include "samediff/env.hpp"
#include "samediff/nn/checkpoint.hpp"
#include "samediff/nn/networks.hpp"
#include "samediff/nn/optim.hpp"

namespace samediff {

struct PPOConfig {
  int batch_size = 128;
  int buffer_size = 1024;
  float beta = 0.005f;
  float epsilon = 0.2f;
  float lambda = 0.95f;
  float gamma = 0.99f;
  float lr = 3.0e-4f;
  float reward_strength = 1.0f;
  long long max_steps = 100'000'000;
  int num_epoch = 3;
  float value_coef = 0.5f;
  bool normalize_advantages = true;

  void validate() const;  // throws std::invalid_argument
};

// Episodic task seen by the learner: integer actions, image + history
// observations, scalar rewards.
struct TaskStep {
  double reward = 0.0;
  bool done = false;
  bool correct = false;  // answered correctly on this step
};

class Task {
 public:
  virtual ~Task() = default;
  virtual int action_count() const = 0;
  virtual int image_height() const = 0;
  virtual int image_width() const = 0;
  virtual int history_size() const = 0;
  virtual void reset(Rng& rng) = 0;
  // frame: [H, W, channels]; history: [history_size]
  virtual void observe(int channels, float* frame, float* history) const = 0;
  virtual TaskStep step(int action) = 0;

  nn::NetShape net_shape(int channels) const {
    return {image_height(), image_width(), channels, history_size(), action_count()};
  }
};

using TrialSource = std::function<Trial(Rng&)>;

// The same-different room behind the Task interface.
class SameDiffTask : public Task {
 public:
  SameDiffTask(Environment env, TrialSource trials);

  int action_count() const override { return env_.policy_action_count(); }
  int image_height() const override { return env_.config().image_height; }
  int image_width() const override { return env_.config().image_width; }
  int history_size() const override { return env_.history_size(); }
  void reset(Rng& rng) override;
  void observe(int channels, float* frame, float* history) const override;
  TaskStep step(int action) override;

  const Environment& environment() const { return env_; }
  const EnvState& state() const { return state_; }

 private:
  Environment env_;
  TrialSource trials_;
  EnvState state_;
};

using TaskFactory = std::function<std::unique_ptr<Task>(int worker)>;

struct GaeResult {
  std::vector<float> advantages;
  std::vector<float> returns;
};

// bootstrap_value is v(s_T) after the last step; ignored when the last step
// is terminal. Advantages are returned unnormalized.
GaeResult compute_gae(const std::vector<float>& rewards, const std::vector<float>& values,
                      const std::vector<bool>& dones, float gamma, float lambda,
                      float bootstrap_value);

// Subtract mean, divide by std (population, floored at 1e-8).
void normalize(std::vector<float>& v);

// Flat, time-ordered training data for one update.
struct UpdateBatch {
  nn::ObsBatch obs;
  std::vector<int> actions;
  std::vector<float> old_log_probs;
  std::vector<float> advantages;
  std::vector<float> returns;
  int size() const { return static_cast<int>(actions.size()); }
  UpdateBatch select(const std::vector<int>& rows) const;
};

struct PPOLoss {
  nn::Var total;
  nn::Var policy;
  nn::Var value;
  nn::Var entropy;
  double clip_fraction = 0.0;
};

// Loss terms for one minibatch.
PPOLoss ppo_loss(const nn::PolicyValueNet& net, const UpdateBatch& mb, const PPOConfig& cfg);

struct UpdateStats {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double clip_fraction = 0.0;
  double aux_loss = 0.0;
  int minibatches = 0;
};

// Optional extra loss added per minibatch as total + weight * aux(). An
// undefined Var from aux() skips the term for that minibatch.
struct AuxLoss {
  std::function<nn::Var()> loss;
  float weight = 0.0f;
};

// num_epoch passes of shuffled minibatches, one optimizer step each. Throws
// nn::NumericalError on a non-finite loss.
UpdateStats ppo_update(const nn::PolicyValueNet& net, nn::Adam& adam, const UpdateBatch& batch,
                       const PPOConfig& cfg, Rng& rng, const AuxLoss* aux = nullptr);

// Steps collected between updates, grouped per worker stream.
struct Rollout {
  std::vector<int> worker;          // stream of each step
  nn::ObsBatch obs;                 // [buffer, ...]
  std::vector<int> actions;
  std::vector<float> rewards;       // training reward (may be rewritten)
  std::vector<float> env_rewards;   // extrinsic reward as emitted
  std::vector<bool> dones;
  std::vector<float> values;
  std::vector<float> log_probs;
  std::vector<float> bootstrap;     // per worker
  int size() const { return static_cast<int>(actions.size()); }
};

// GAE per worker stream, then flattened in rollout order.
UpdateBatch make_update_batch(const Rollout& r, const PPOConfig& cfg);

struct CurvePoint {
  long long episode = 0;
  double mean_reward = 0.0;
  double entropy = 0.0;
  double clip_fraction = 0.0;
  int lesson_index = 0;
};

std::string curve_csv_header();
std::string curve_to_csv(const std::vector<CurvePoint>& curve);

enum class StopReason {
  None, Plateau, MaxSteps, EpisodeBudget, Forgetting, CurriculumFinished, CurriculumStalled,
  Diverged, Stuck
};
std::string_view to_string(StopReason r);

struct StopRules {
  long long episode_budget = 2'000'000;
  long long plateau_window = 5'000'000;  // episodes without a new best; 0 disables
  double plateau_tolerance = 0.01;
  int log_every = 1000;                  // episodes per curve point
  bool forgetting = true;
  ForgettingConfig forgetting_cfg;
  // A run still at or below stuck_reward after this share of the budget is
  // marked failed.
  double stuck_fraction = 0.2;
  double stuck_reward = -0.5;
};

struct TrainHooks {
  // Runs after collection and before advantages are computed.
  std::function<void(Rollout&)> on_rollout;
  AuxLoss aux;
  // Sees every finished episode's extrinsic return.
  std::function<void(double reward, bool correct)> on_episode;
  std::function<int()> lesson_index;
  // Checked after every finished episode.
  std::function<std::optional<StopReason>()> should_stop;
  // Progress line per curve point.
  std::function<void(const CurvePoint&)> on_log;
};

struct TrainOptions {
  PPOConfig ppo;
  StopRules stop;
  int n_envs = 16;
  int channels = 1;
  std::uint64_t seed = 0;
};

struct TrainResult {
  StopReason reason = StopReason::None;
  bool failed = false;
  std::string failure;
  long long episodes = 0;
  long long steps = 0;
  std::vector<CurvePoint> curve;
  double best_mean_reward = -1e300;
  nn::Checkpoint best;  // parameters at the best curve point
  UpdateStats last_update;
};

TrainResult train_loop(const TaskFactory& factory, nn::PolicyValueNet& net, nn::Adam& adam,
                       const TrainOptions& opt, const TrainHooks& hooks = {});

// Mean reward blocks -> plateau test used by train_loop.
struct PlateauTracker {
  double tolerance = 0.01;
  long long window = 0;
  double best = -1e300;
  long long best_episode = 0;
  bool started = false;
  // Returns true when the plateau rule fires.
  bool update(double block_mean, long long episode);
};

}  // namespace samediff
