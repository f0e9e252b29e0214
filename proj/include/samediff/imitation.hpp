#pragma once

// Demonstrations: the recorded format, fixation-to-grid conversion, scripted
// stand-in demos, the behavioral cloning loss and the adversarial reward.

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "samediff/env.hpp"
#include "samediff/nn/networks.hpp"
#include "samediff/nn/optim.hpp"
#include "samediff/ppo.hpp"

namespace samediff {

inline constexpr double kDemoSampleRate = 120.0;

struct GazeSample {
  double t = 0.0;  // seconds
  Vec3 head_position;
  Vec3 gaze_target;
  bool operator==(const GazeSample&) const = default;
};

struct DemonstrationTrial {
  Trial trial;
  std::vector<GazeSample> samples;
  Label final_answer = Label::Same;
  void validate() const;  // throws std::invalid_argument
};

struct DiscreteDemo {
  Trial trial;
  std::string env;  // e.g. "d6"
  std::vector<Action> actions;  // views, then exactly one Answer
  std::vector<int> dwell;       // per action; samples (or steps) spent on it
  void validate(const ViewpointGrid& grid) const;
  Label answer() const;
};

struct FixationConfig {
  double max_spread = 0.1;     // meters, gaze and head
  double min_duration = 0.1;   // seconds
  double sample_period = 1.0 / kDemoSampleRate;
};

struct Fixation {
  std::size_t first = 0;  // sample indices, inclusive
  std::size_t last = 0;
  Vec3 head;   // mean head position
  Vec3 gaze;   // mean gaze target
};

// Consecutive samples whose gaze target and head stay within max_spread of
// the segment's first sample, kept when they last at least min_duration.
std::vector<Fixation> extract_fixations(const std::vector<GazeSample>& samples,
                                        const FixationConfig& cfg = {});

// Nearest grid location to the head (ties -> lower index) and the nearer
// object to the gaze target (ties -> A).
ViewAction snap_fixation(const Fixation& f, const ViewpointGrid& grid, const RoomConfig& cfg);

DiscreteDemo discretize_demo(const DemonstrationTrial& demo, const Environment& env,
                             const FixationConfig& cfg = {});

// Grid-snapped continuous form: each view becomes `dwell` samples standing
// at the location and gazing at the target's anchor.
DemonstrationTrial to_continuous(const DiscreteDemo& demo, const Environment& env);

struct SynthConfig {
  double error_rate = 0.062;
  int min_views = 3;
  int max_views = 6;
  double min_dwell = 0.2;  // seconds
  double max_dwell = 0.6;
  double walk_speed = 1.0;  // m/s
  double min_transition = 0.3;
  double sweep_radius = 0.4;  // gaze circle during transitions, meters
  double sweep_hz = 2.0;
};

struct SyntheticDemo {
  DemonstrationTrial demo;
  std::vector<ViewAction> script;  // the viewpoints the generator visited
};

// Scripted competent viewer: visits distinct grid viewpoints, alternating
// gaze targets, then answers from the congruence oracle with the given
// error rate. Trials are balanced over label, difficulty and orientation.
std::vector<SyntheticDemo> synthesize_demos_with_script(const ObjectSet& set,
                                                        const Environment& env, int n, Rng& rng,
                                                        const SynthConfig& cfg = {});
std::vector<DemonstrationTrial> synthesize_demos(const ObjectSet& set, const Environment& env,
                                                 int n, Rng& rng, const SynthConfig& cfg = {});

// Steps a discrete demo from reset and records rewards, poses and
// observation hashes. Throws std::invalid_argument when the episode ends
// before the last action.
EpisodeTrace demo_to_trace(const DiscreteDemo& demo, const Environment& env);

// --- Demo files (JSON lines) ---

struct DemoRecord {
  std::optional<DemonstrationTrial> continuous;
  std::optional<DiscreteDemo> discrete;
};

nlohmann::json demo_to_json(const DemonstrationTrial& d);
nlohmann::json demo_to_json(const DiscreteDemo& d);
DemoRecord demo_from_json(const nlohmann::json& j, const ObjectSet& set);
std::string demo_file_header(std::uint64_t object_seed = kDefaultObjectSeed);
std::vector<DemoRecord> read_demo_file(const std::string& path, const ObjectSet& set);
void write_demo_file(const std::string& path, const std::vector<DemoRecord>& records,
                     std::uint64_t object_seed = kDefaultObjectSeed);

// --- Behavioral cloning ---

struct BCConfig {
  float strength = 0.5f;
  long long steps = 0;  // 0 = active for the whole run
  int batch_size = 128;
  int num_epoch = 5;
  int samples_per_update = 0;  // 0 = all
};

// Re-rendered (observation, action) pairs from discrete demos.
struct DemoDataset {
  nn::ObsBatch obs;
  std::vector<int> actions;
  int size() const { return static_cast<int>(actions.size()); }
  nn::ObsBatch select(const std::vector<int>& rows, std::vector<int>* actions_out) const;
};

DemoDataset build_demo_dataset(const std::vector<DiscreteDemo>& demos, const Environment& env,
                               int channels);

// Mean cross-entropy of the demo actions under the policy.
nn::Var bc_loss(const nn::PolicyValueNet& net, const nn::ObsBatch& obs,
                const std::vector<int>& actions);

// --- Adversarial imitation ---

struct GAILConfig {
  float strength = 1.0f;
  float gamma = 0.99f;
  float lr = 3.0e-4f;
  bool use_actions = false;
  bool use_vail = false;
  int batch_size = 128;
  bool mix_extrinsic = false;
};

// -log(1 - sigmoid(logit)), clipped to [0, 10].
float gail_reward_from_logit(float logit);
std::vector<float> gail_reward(const nn::Discriminator& d, const nn::Tensor& frames);

struct GailStats {
  double loss = 0.0;
  double accuracy = 0.0;  // demo > 0.5, policy < 0.5
};

// Logistic loss with demos labeled 1 and policy samples 0; one optimizer
// step. Throws std::invalid_argument on an empty demo batch.
GailStats gail_update(const nn::Discriminator& d, nn::Adam& adam, const nn::Tensor& policy_frames,
                      const nn::Tensor& demo_frames);

// Wires BC or GAIL into the PPO loop. The returned hooks reference the
// dataset, discriminator and optimizer, which must outlive training.
TrainHooks bc_hooks(const nn::PolicyValueNet& net, const DemoDataset& demos, const BCConfig& cfg,
                    Rng& rng);
TrainHooks gail_hooks(const nn::Discriminator& d, nn::Adam& adam, const DemoDataset& demos,
                      const GAILConfig& cfg, Rng& rng);

}  // namespace samediff
