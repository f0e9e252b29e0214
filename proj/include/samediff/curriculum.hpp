#pragma once

// Thirteen-lesson plans over (difficulty, relative orientation), the
// advancement rule, and the forgetting detector.

#include <deque>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "samediff/objects.hpp"

namespace samediff {

inline constexpr int kLessonCount = 13;

struct Lesson {
  int index = 1;  // 1-based
  std::vector<Difficulty> difficulties;
  std::vector<int> ro_set;
  bool operator==(const Lesson&) const = default;
};

struct LessonPlan {
  std::string name;
  std::vector<Lesson> lessons;
  void validate() const;  // throws std::invalid_argument
  const Lesson& lesson(int index) const { return lessons.at(static_cast<std::size_t>(index - 1)); }
};

LessonPlan naive_plan();
// Medium and hard blocks ordered 90, 180, 0.
LessonPlan human_informed_plan();
// Medium and hard blocks ordered 90, 0, 180.
LessonPlan human_informed_text_plan();
// "naive", "human" or "human_text" (the plan names are accepted too).
LessonPlan plan_by_name(const std::string& name);
std::vector<LessonPlan> builtin_plans();

nlohmann::json plan_to_json(const LessonPlan& plan);
LessonPlan plan_from_json(const nlohmann::json& j);
LessonPlan load_plan_file(const std::string& path);

// Uniform over the lesson's difficulty x RO set, labels 50/50.
Trial trial_sampler(const ObjectSet& set, const Lesson& lesson, Rng& rng);

struct CurriculumConfig {
  int window = 5000;
  double threshold = 0.8;
  // 0 = unlimited. A lesson not passed within this many episodes stalls
  // the run.
  long long max_episodes_per_lesson = 0;
};

enum class AdvanceDecision { Stay, Advance, Finished };

struct CurriculumState {
  int lesson_index = 1;
  std::vector<long long> episodes_per_lesson = std::vector<long long>(kLessonCount, 0);
  std::deque<double> recent;  // rewards in the current lesson, at most `window`
  double recent_sum = 0.0;
  double moving_average = 0.0;
  double best_reward = -1e300;
  bool forgetting = false;
  bool finished = false;
  bool stalled = false;
};

// The pure rule: mean >= threshold advances (or finishes on the last lesson).
AdvanceDecision advance_check(const CurriculumState& state, double recent_mean,
                              const CurriculumConfig& cfg);

// Feeds one finished episode. The rule is consulted once the window is full;
// on Advance the window restarts for the new lesson.
AdvanceDecision record_episode(CurriculumState& state, double reward, const CurriculumConfig& cfg);

struct ForgettingConfig {
  double min_drop = 0.5;
  double floor = 0.1;
};

// history holds windowed mean rewards, oldest first.
bool forgetting_detector(const std::vector<double>& history, const ForgettingConfig& cfg = {});

}  // namespace samediff
