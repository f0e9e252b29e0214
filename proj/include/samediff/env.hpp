#pragma once

// The simulated room, its discrete and continuous action spaces, episode
// mechanics and the sparse reward.

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "samediff/geometry.hpp"
#include "samediff/objects.hpp"
#include "samediff/render.hpp"

namespace samediff {

struct RoomConfig {
  double width = 3.0;   // x extent, meters
  double depth = 4.0;   // z extent
  double height = 3.0;  // y extent
  double object_separation = 1.2;
  double object_height = 1.5;
  int image_width = 64;
  int image_height = 64;
  int max_steps_per_episode = 256;
  double fov = 60.0;
  int history_length = 8;

  void validate() const;  // throws std::invalid_argument
  Vec3 anchor_a() const { return {width / 2 - object_separation / 2, object_height, depth / 2}; }
  Vec3 anchor_b() const { return {width / 2 + object_separation / 2, object_height, depth / 2}; }
  Vec3 room_center() const { return {width / 2, object_height, depth / 2}; }
};

inline constexpr int kMaxImageSide = 512;
inline constexpr std::array<int, 6> kGridSizes = {6, 12, 24, 48, 72, 96};

enum class Target { ObjectA, ObjectB };

struct ViewpointLocation {
  Vec3 position;
  int ring = 0;  // 0 = outer
  int tier = 0;  // height tier
  double angle_deg = 0.0;
};

struct ViewpointGrid {
  int n_locations = 0;
  std::vector<ViewpointLocation> locations;

  int view_action_count() const { return 2 * n_locations; }
};

// Throws std::invalid_argument for sizes outside kGridSizes.
ViewpointGrid build_grid(int n, const RoomConfig& cfg);

struct ViewAction {
  int location = 0;
  Target target = Target::ObjectA;
  bool operator==(const ViewAction&) const = default;
};

struct AnswerAction {
  Label answer = Label::Same;
  bool operator==(const AnswerAction&) const = default;
};

// Continuous control; deltas are clamped by the environment.
struct MoveAction {
  double dx = 0.0, dy = 0.0, dz = 0.0;  // meters
  double dpitch = 0.0, dyaw = 0.0;      // degrees
  std::optional<Label> answer;
  bool operator==(const MoveAction&) const = default;
};

inline constexpr double kMaxTranslationStep = 0.05;
inline constexpr double kMaxRotationStep = 5.0;

using Action = std::variant<ViewAction, AnswerAction, MoveAction>;

enum class Outcome { None, Correct, Incorrect, Timeout };
std::string_view to_string(Outcome o);

struct Pose {
  Vec3 position;
  double pitch = 0.0;
  double yaw = 0.0;
  bool operator==(const Pose&) const = default;
};

struct EnvState {
  Trial trial;
  std::shared_ptr<const Scene> scene;
  Pose pose;
  int location = -1;  // discrete only
  Target target = Target::ObjectA;
  int step_count = 0;
  std::vector<Action> action_history;  // most recent last, bounded
  bool done = false;
  Outcome outcome = Outcome::None;
};

struct Observation {
  Image frame;
  std::vector<float> history;
};

std::uint64_t observation_hash(const Observation& obs);

struct StepResult {
  EnvState state;
  double reward = 0.0;
  bool done = false;
};

inline constexpr double kCorrectReward = 1.0;
inline constexpr double kIncorrectReward = -1.0;
inline constexpr double kPenalty = -0.01;

// Motion primitives the categorical policy uses in the continuous room:
// +-x, +-y, +-z, +-pitch, +-yaw at the maximum step, then Same, Different.
inline constexpr int kContinuousPolicyActions = 12;

class Environment {
 public:
  // n_locations = 0 selects the continuous room.
  Environment(RoomConfig cfg, int n_locations);

  // "d6" ... "d96" or "continuous".
  static Environment from_name(const std::string& name, const RoomConfig& cfg = {});
  std::string name() const;

  bool discrete() const { return grid_.n_locations > 0; }
  const RoomConfig& config() const { return cfg_; }
  const ViewpointGrid& grid() const { return grid_; }

  int policy_action_count() const;
  int history_width() const;  // per-action encoding width
  int history_size() const { return history_width() * cfg_.history_length; }
  Action decode_policy_action(int index) const;
  int encode_policy_action(const Action& a) const;  // discrete only

  EnvState reset(const Trial& trial) const;
  // Pure in (state, action). Throws std::logic_error on a finished episode
  // and std::invalid_argument for actions that do not belong to this room.
  StepResult step(const EnvState& state, const Action& action) const;
  Observation observe(const EnvState& state) const;

  Scene make_scene(const Trial& trial) const;
  Camera camera_for(const Pose& pose) const;
  Pose start_pose() const;  // continuous start square
  // Gaze ray hits either object's bounding sphere (radius +10%).
  bool gaze_on_object(const EnvState& state, const Pose& pose) const;

 private:
  RoomConfig cfg_;
  ViewpointGrid grid_;
};

// One step of a recorded episode.
struct StepRecord {
  Action action;
  double reward = 0.0;
  Pose pose;
  bool done = false;
  std::uint64_t obs_hash = 0;  // observation after the step
};

struct EpisodeTrace {
  std::string env_name;
  int image_width = 64;
  int image_height = 64;
  int max_steps_per_episode = 256;
  Trial trial;
  std::uint64_t initial_obs_hash = 0;
  std::vector<StepRecord> steps;
  Outcome outcome = Outcome::None;
};

struct EpisodeMetrics {
  bool correct = false;
  int n_viewpoints = 0;
  std::map<int, int> viewpoint_histogram;
  double dominant_share() const;
};

// Throws std::logic_error when the episode has not finished.
EpisodeMetrics episode_metrics(const EpisodeTrace& trace);

nlohmann::json action_to_json(const Action& a);
Action action_from_json(const nlohmann::json& j);

// JSON-lines: one header line, then one line per step.
std::string trace_to_jsonl(const EpisodeTrace& trace);
EpisodeTrace trace_from_jsonl(const std::string& text, const ObjectSet& set);

struct ReplayResult {
  bool rewards_match = true;
  bool hashes_match = true;
  std::vector<Observation> observations;  // initial + one per step
};

// Re-runs the recorded actions and compares rewards and observation hashes.
ReplayResult replay_trace(const EpisodeTrace& trace, const RoomConfig& base_cfg = {});

}  // namespace samediff
