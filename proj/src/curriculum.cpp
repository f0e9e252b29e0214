#include "samediff/curriculum.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace samediff {

namespace {

LessonPlan build_plan(std::string name, const std::array<int, 3>& hard_block_order) {
  LessonPlan plan;
  plan.name = std::move(name);
  const std::array<int, 3> easy_order = {0, 90, 180};
  int index = 1;
  for (Difficulty d : kAllDifficulties) {
    const auto& order = d == Difficulty::Easy ? easy_order : hard_block_order;
    for (int ro : order) plan.lessons.push_back({index++, {d}, {ro}});
    plan.lessons.push_back({index++, {d}, {0, 90, 180}});
  }
  plan.lessons.push_back(
      {index, {Difficulty::Easy, Difficulty::Medium, Difficulty::Hard}, {0, 90, 180}});
  return plan;
}

}  // namespace

LessonPlan naive_plan() { return build_plan("Naive", {0, 90, 180}); }
LessonPlan human_informed_plan() { return build_plan("HumanInformed", {90, 180, 0}); }
LessonPlan human_informed_text_plan() {
  return build_plan("HumanInformedTextVariant", {90, 0, 180});
}

std::vector<LessonPlan> builtin_plans() {
  return {naive_plan(), human_informed_plan(), human_informed_text_plan()};
}

LessonPlan plan_by_name(const std::string& name) {
  if (name == "naive" || name == "Naive") return naive_plan();
  if (name == "human" || name == "HumanInformed") return human_informed_plan();
  if (name == "human_text" || name == "HumanInformedTextVariant") return human_informed_text_plan();
  throw std::invalid_argument("unknown lesson plan '" + name + "'");
}

void LessonPlan::validate() const {
  if (static_cast<int>(lessons.size()) != kLessonCount)
    throw std::invalid_argument("plan " + name + ": expected 13 lessons, got " +
                                std::to_string(lessons.size()));
  for (std::size_t i = 0; i < lessons.size(); ++i) {
    const auto& l = lessons[i];
    if (l.index != static_cast<int>(i) + 1)
      throw std::invalid_argument("plan " + name + ": lesson indices must run 1..13");
    if (l.difficulties.empty() || l.ro_set.empty())
      throw std::invalid_argument("plan " + name + ": lesson " + std::to_string(l.index) +
                                  " has an empty set");
    for (int ro : l.ro_set)
      if (std::find(kTestedOrientations.begin(), kTestedOrientations.end(), ro) ==
          kTestedOrientations.end())
        throw std::invalid_argument("plan " + name + ": unsupported orientation " +
                                    std::to_string(ro));
  }
  const auto& last = lessons.back();
  if (last.difficulties.size() != 3 || last.ro_set.size() != 3)
    throw std::invalid_argument("plan " + name + ": lesson 13 must cover every combination");
}

nlohmann::json plan_to_json(const LessonPlan& plan) {
  nlohmann::json lessons = nlohmann::json::array();
  for (const auto& l : plan.lessons) {
    nlohmann::json diffs = nlohmann::json::array();
    for (auto d : l.difficulties) diffs.push_back(std::string(to_string(d)));
    lessons.push_back({{"index", l.index}, {"difficulties", diffs}, {"ro", l.ro_set}});
  }
  return {{"name", plan.name}, {"lessons", lessons}};
}

LessonPlan plan_from_json(const nlohmann::json& j) {
  LessonPlan plan;
  plan.name = j.at("name").get<std::string>();
  for (const auto& lj : j.at("lessons")) {
    Lesson l;
    l.index = lj.at("index").get<int>();
    for (const auto& d : lj.at("difficulties"))
      l.difficulties.push_back(difficulty_from_string(d.get<std::string>()));
    l.ro_set = lj.at("ro").get<std::vector<int>>();
    plan.lessons.push_back(std::move(l));
  }
  plan.validate();
  return plan;
}

LessonPlan load_plan_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open plan file " + path);
  return plan_from_json(nlohmann::json::parse(f));
}

Trial trial_sampler(const ObjectSet& set, const Lesson& lesson, Rng& rng) {
  const auto d = lesson.difficulties[rng.uniform_int(lesson.difficulties.size())];
  const int ro = lesson.ro_set[rng.uniform_int(lesson.ro_set.size())];
  const Label label = rng.bernoulli(0.5) ? Label::Same : Label::Different;
  return make_trial(set, d, ro, label, rng);
}

AdvanceDecision advance_check(const CurriculumState& state, double recent_mean,
                              const CurriculumConfig& cfg) {
  if (state.finished) return AdvanceDecision::Finished;
  if (recent_mean < cfg.threshold) return AdvanceDecision::Stay;
  return state.lesson_index >= kLessonCount ? AdvanceDecision::Finished : AdvanceDecision::Advance;
}

AdvanceDecision record_episode(CurriculumState& state, double reward, const CurriculumConfig& cfg) {
  if (state.finished) return AdvanceDecision::Finished;
  if (cfg.window <= 0) throw std::invalid_argument("curriculum window must be positive");
  ++state.episodes_per_lesson.at(static_cast<std::size_t>(state.lesson_index - 1));
  state.recent.push_back(reward);
  state.recent_sum += reward;
  if (static_cast<int>(state.recent.size()) > cfg.window) {
    state.recent_sum -= state.recent.front();
    state.recent.pop_front();
  }
  state.moving_average = state.recent_sum / static_cast<double>(state.recent.size());
  auto decision = AdvanceDecision::Stay;
  if (static_cast<int>(state.recent.size()) >= cfg.window) {
    state.best_reward = std::max(state.best_reward, state.moving_average);
    decision = advance_check(state, state.moving_average, cfg);
  }
  if (decision == AdvanceDecision::Advance) {
    ++state.lesson_index;
    state.recent.clear();
    state.recent_sum = 0.0;
  } else if (decision == AdvanceDecision::Finished) {
    state.finished = true;
  } else if (cfg.max_episodes_per_lesson > 0 &&
             state.episodes_per_lesson[static_cast<std::size_t>(state.lesson_index - 1)] >=
                 cfg.max_episodes_per_lesson) {
    state.stalled = true;
  }
  return decision;
}

bool forgetting_detector(const std::vector<double>& history, const ForgettingConfig& cfg) {
  if (history.size() < 2) return false;
  const double best = *std::max_element(history.begin(), history.end() - 1);
  const double current = history.back();
  return best - current >= cfg.min_drop && current <= cfg.floor;
}

}  // namespace samediff
