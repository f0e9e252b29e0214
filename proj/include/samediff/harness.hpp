#pragma once

// Run configuration, per-seed training orchestration, greedy evaluation,
// seed aggregation and viewpoint heatmaps.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "samediff/curriculum.hpp"
#include "samediff/env.hpp"
#include "samediff/imitation.hpp"
#include "samediff/ppo.hpp"

namespace samediff {

enum class Method { PPO, BC, GAIL, Curriculum };
std::string_view to_string(Method m);
Method method_from_string(std::string_view s);

struct RunConfig {
  Method method = Method::PPO;
  std::string plan = "naive";  // curriculum only
  std::string env = "d6";
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11};
  long long episode_budget = 2'000'000;
  long long plateau_window = 5'000'000;
  int resolution = 64;
  std::string output_dir = "runs/default";

  int n_envs = 16;
  int channels = 1;
  int log_every = 1000;
  int max_steps_per_episode = 256;
  std::uint64_t object_seed = kDefaultObjectSeed;
  int eval_trials = 1000;
  bool forgetting = true;
  int jobs = 1;  // seeds trained concurrently

  PPOConfig ppo;
  CurriculumConfig curriculum;
  BCConfig bc;
  GAILConfig gail;
  std::string demos_path;  // empty: synthesize n_demos
  int n_demos = 791;

  // Throws std::invalid_argument describing the first problem found.
  void validate() const;
  RoomConfig room() const;
  nlohmann::json to_json() const;
};

// Flat key = value text. Blank lines and '#' comments are skipped; values may
// be bare, double-quoted, or a bracketed list of integers (seeds).
std::map<std::string, std::string> parse_flat_config(const std::string& text);

// Applies one key; throws std::invalid_argument for unknown keys or bad values.
void apply_config_value(RunConfig& cfg, const std::string& key, const std::string& value);

// Loads the file (if non-empty), then applies "key=value" overrides in order.
RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides);

// --- Evaluation ---

// Chooses one policy action per active episode. Scripted test policies may
// inspect the full state; network policies only its observation.
using EvalPolicy =
    std::function<void(const Environment& env, const std::vector<const EnvState*>& states,
                       std::vector<int>& actions)>;

// Greedy (or sampled) actions from a policy network.
EvalPolicy network_policy(const nn::PolicyValueNet& net, int channels, bool stochastic = false,
                          std::uint64_t seed = 0);

struct EvalOptions {
  int n_trials = 1000;
  std::uint64_t seed = 0;
  int batch = 32;           // episodes advanced together
  bool record_traces = false;
};

struct EvalReport {
  std::string env;
  int n_trials = 0;
  int n_correct = 0;
  int n_timeouts = 0;
  long long total_viewpoints = 0;
  double accuracy = 0.0;         // percent
  double mean_viewpoints = 0.0;  // per episode
  double timeout_rate = 0.0;     // fraction
  double dominant_share = 0.0;   // max(histogram) / total viewpoints
  std::map<int, long long> histogram;
  // "easy/0" -> percent correct
  std::map<std::string, double> accuracy_by_condition;
  std::vector<EpisodeTrace> traces;  // only with record_traces

  bool operator==(const EvalReport& o) const;
};

// Trials cycle through label x difficulty x orientation in shuffled order,
// so every combination appears floor(n/18) or ceil(n/18) times.
std::vector<Trial> balanced_trials(const ObjectSet& set, int n, Rng& rng);

EvalReport evaluate(const Environment& env, const ObjectSet& set, const EvalPolicy& policy,
                    const EvalOptions& opt = {});

// Traces are not part of the JSON form.
nlohmann::json report_to_json(const EvalReport& r);
EvalReport report_from_json(const nlohmann::json& j);
// Throws std::invalid_argument when a field is missing or inconsistent.
void validate_report_json(const nlohmann::json& j);

// --- Aggregation ---

struct SeedOutcome {
  std::uint64_t seed = 0;
  std::optional<EvalReport> report;
  bool excluded = false;
  std::string reason;  // why excluded
};

struct SeedSummary {
  bool failed = false;  // every seed excluded
  int included = 0;
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;
  double mean_viewpoints = 0.0;
  double std_viewpoints = 0.0;
  std::vector<std::pair<std::uint64_t, std::string>> exclusions;
};

SeedSummary aggregate_seeds(const std::vector<SeedOutcome>& seeds);
nlohmann::json summary_to_json(const SeedSummary& s);

// --- Heatmaps ---

// Per-location frequencies normalized to sum to 1 (all zero when no views).
std::vector<double> heatmap_frequencies(const EvalReport& r, const ViewpointGrid& grid);
// location,ring,tier,angle_deg,x,z,count,frequency
std::string heatmap_csv(const EvalReport& r, const ViewpointGrid& grid);
// Top-down map of the room: objects as dark squares, locations as discs
// whose brightness follows frequency.
Image heatmap_image(const EvalReport& r, const ViewpointGrid& grid, const RoomConfig& cfg,
                    int size = 256);

// --- Training ---

struct SeedRun {
  std::uint64_t seed = 0;
  TrainResult train;
  int final_lesson = 0;  // curriculum only
  nn::Checkpoint eval_checkpoint;
  EvalReport report;
  bool excluded = false;
  std::string reason;
};

// Builds the objects, environment, network and method hooks, trains one seed
// and evaluates the retained checkpoint. `log` receives progress lines.
SeedRun run_seed(const RunConfig& cfg, std::uint64_t seed,
                 const std::function<void(const std::string&)>& log = {});

// Runs every seed and writes under output_dir: config.json, per-seed
// curve_<seed>.csv, checkpoint_<seed>.bin, report_<seed>.json, plus
// seeds.json (manifest), excluded_seeds.log and summary.json.
SeedSummary train_all(const RunConfig& cfg, const std::function<void(const std::string&)>& log = {});

// Checkpoint metadata needed to rebuild the policy network.
nlohmann::json checkpoint_metadata(const RunConfig& cfg, const Environment& env,
                                   std::uint64_t seed);
// Rebuilds the environment and network from a training checkpoint.
struct LoadedPolicy {
  Environment env;
  nn::PolicyValueNet net;
  int channels = 1;
};
LoadedPolicy load_policy(const nn::Checkpoint& ck);

}  // namespace samediff
