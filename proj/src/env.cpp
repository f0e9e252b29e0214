#include "samediff/env.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace samediff {

void RoomConfig::validate() const {
  if (!(width > 0 && depth > 0 && height > 0 && object_separation > 0 && object_height > 0))
    throw std::invalid_argument("RoomConfig: dimensions must be positive");
  if (object_separation >= width) throw std::invalid_argument("RoomConfig: objects outside room");
  if (object_height >= height) throw std::invalid_argument("RoomConfig: object above ceiling");
  if (image_width <= 0 || image_height <= 0 || image_width > kMaxImageSide ||
      image_height > kMaxImageSide)
    throw std::invalid_argument("RoomConfig: image size must lie in [1, 512]");
  if (max_steps_per_episode <= 0) throw std::invalid_argument("RoomConfig: max_steps must be > 0");
  if (history_length < 0) throw std::invalid_argument("RoomConfig: negative history length");
}

std::string_view to_string(Outcome o) {
  switch (o) {
    case Outcome::None:
      return "none";
    case Outcome::Correct:
      return "correct";
    case Outcome::Incorrect:
      return "incorrect";
    case Outcome::Timeout:
      return "timeout";
  }
  return "none";
}

// --- Grid ---

ViewpointGrid build_grid(int n, const RoomConfig& cfg) {
  cfg.validate();
  struct Ring {
    double ax, az;
  };
  // Flat ellipses around the pair: oblique locations see both objects in
  // one frame, which a memoryless policy needs to compare them.
  const Ring outer{cfg.width / 2 - 0.2, cfg.object_separation / 2 + 0.2};
  const Ring inner{cfg.object_separation / 2 + 0.4, cfg.object_separation / 2 - 0.1};

  std::vector<Ring> rings;
  std::vector<double> tiers;
  int per_ring = 0;
  switch (n) {
    case 6:
    case 12:
    case 24:
      rings = {outer};
      tiers = {cfg.object_height};
      per_ring = n;
      break;
    case 48:
      rings = {outer, inner};
      tiers = {cfg.object_height};
      per_ring = 24;
      break;
    case 72:
      rings = {outer, inner};
      tiers = {cfg.object_height};
      per_ring = 36;
      break;
    case 96:
      rings = {outer, inner};
      tiers = {1.2, 1.8};
      per_ring = 24;
      break;
    default:
      throw std::invalid_argument("build_grid: unsupported location count " + std::to_string(n));
  }

  ViewpointGrid grid;
  grid.n_locations = n;
  const Vec3 c = cfg.room_center();
  for (std::size_t t = 0; t < tiers.size(); ++t) {
    for (std::size_t r = 0; r < rings.size(); ++r) {
      for (int k = 0; k < per_ring; ++k) {
        // Location 0 faces the pair from the start-square side of the room.
        const double angle = -90.0 + 360.0 * k / per_ring;
        const double a = deg_to_rad(angle);
        ViewpointLocation loc;
        loc.position = {c.x + rings[r].ax * std::cos(a), tiers[t], c.z + rings[r].az * std::sin(a)};
        loc.ring = static_cast<int>(r);
        loc.tier = static_cast<int>(t);
        loc.angle_deg = angle;
        grid.locations.push_back(loc);
      }
    }
  }
  return grid;
}

// --- Environment ---

Environment::Environment(RoomConfig cfg, int n_locations) : cfg_(std::move(cfg)) {
  cfg_.validate();
  if (n_locations != 0) grid_ = build_grid(n_locations, cfg_);
}

Environment Environment::from_name(const std::string& name, const RoomConfig& cfg) {
  if (name == "continuous") return Environment(cfg, 0);
  if (name.size() > 1 && name[0] == 'd') {
    int n = 0;
    try {
      n = std::stoi(name.substr(1));
    } catch (const std::exception&) {
      throw std::invalid_argument("unknown environment: " + name);
    }
    return Environment(cfg, n);
  }
  throw std::invalid_argument("unknown environment: " + name);
}

std::string Environment::name() const {
  return discrete() ? "d" + std::to_string(grid_.n_locations) : "continuous";
}

int Environment::policy_action_count() const {
  return discrete() ? grid_.view_action_count() + 2 : kContinuousPolicyActions;
}

int Environment::history_width() const { return discrete() ? policy_action_count() : 5; }

Action Environment::decode_policy_action(int index) const {
  const int count = policy_action_count();
  if (index < 0 || index >= count)
    throw std::out_of_range("policy action " + std::to_string(index) + " out of range");
  if (index == count - 2) return AnswerAction{Label::Same};
  if (index == count - 1) return AnswerAction{Label::Different};
  if (discrete()) return ViewAction{index / 2, index % 2 == 0 ? Target::ObjectA : Target::ObjectB};
  MoveAction m;
  const double sign = index % 2 == 0 ? 1.0 : -1.0;
  switch (index / 2) {
    case 0:
      m.dx = sign * kMaxTranslationStep;
      break;
    case 1:
      m.dy = sign * kMaxTranslationStep;
      break;
    case 2:
      m.dz = sign * kMaxTranslationStep;
      break;
    case 3:
      m.dpitch = sign * kMaxRotationStep;
      break;
    default:
      m.dyaw = sign * kMaxRotationStep;
      break;
  }
  return m;
}

int Environment::encode_policy_action(const Action& a) const {
  const int count = policy_action_count();
  if (const auto* ans = std::get_if<AnswerAction>(&a))
    return ans->answer == Label::Same ? count - 2 : count - 1;
  if (const auto* v = std::get_if<ViewAction>(&a)) {
    if (!discrete()) throw std::invalid_argument("view action in continuous room");
    return 2 * v->location + (v->target == Target::ObjectA ? 0 : 1);
  }
  throw std::invalid_argument("encode_policy_action: continuous moves have no policy index");
}

Scene Environment::make_scene(const Trial& trial) const {
  Scene s;
  s.room_size = {cfg_.width, cfg_.height, cfg_.depth};
  s.object_a = place_object(trial.object_a.cells, cfg_.anchor_a());
  s.object_b = place_object(rotate(trial.object_b, trial.rotation_b).cells, cfg_.anchor_b());
  return s;
}

Camera Environment::camera_for(const Pose& pose) const {
  Camera cam;
  cam.position = pose.position;
  cam.pitch = pose.pitch;
  cam.yaw = pose.yaw;
  cam.fov = cfg_.fov;
  cam.width = cfg_.image_width;
  cam.height = cfg_.image_height;
  return cam;
}

Pose Environment::start_pose() const {
  Pose p;
  p.position = {cfg_.width / 2, cfg_.object_height, 0.3};
  p.pitch = 0.0;
  p.yaw = 0.0;
  return p;
}

namespace {

Pose view_pose(const ViewpointGrid& grid, const Scene& scene, int location, Target target) {
  Pose p;
  p.position = grid.locations[location].position;
  const Vec3 aim = target == Target::ObjectA ? scene.object_a.center() : scene.object_b.center();
  std::tie(p.pitch, p.yaw) = look_at(p.position, aim);
  return p;
}

bool ray_hits_sphere(const Vec3& origin, const Vec3& dir, const Vec3& center, double radius) {
  const Vec3 oc = center - origin;
  const double r2 = radius * radius;
  if (dot(oc, oc) <= r2) return true;
  const double along = dot(oc, dir);
  if (along < 0.0) return false;
  const double perp2 = dot(oc, oc) - along * along;
  return perp2 <= r2;
}

double wrap_degrees(double a) {
  a = std::fmod(a + 180.0, 360.0);
  if (a < 0) a += 360.0;
  return a - 180.0;
}

}  // namespace

EnvState Environment::reset(const Trial& trial) const {
  EnvState s;
  s.trial = trial;
  s.scene = std::make_shared<const Scene>(make_scene(trial));
  if (discrete()) {
    s.location = 0;
    s.target = Target::ObjectA;
    s.pose = view_pose(grid_, *s.scene, 0, Target::ObjectA);
  } else {
    s.pose = start_pose();
  }
  return s;
}

bool Environment::gaze_on_object(const EnvState& state, const Pose& pose) const {
  const Vec3 dir = camera_for(pose).forward();
  for (const VoxelObject* o : {&state.scene->object_a, &state.scene->object_b})
    if (ray_hits_sphere(pose.position, dir, o->center(), 1.1 * o->circumradius())) return true;
  return false;
}

StepResult Environment::step(const EnvState& state, const Action& action) const {
  if (state.done) throw std::logic_error("step: episode already finished");
  StepResult out{state, 0.0, false};
  EnvState& next = out.state;

  std::optional<Label> answer;
  if (const auto* a = std::get_if<AnswerAction>(&action)) answer = a->answer;
  if (const auto* m = std::get_if<MoveAction>(&action)) {
    if (discrete()) throw std::invalid_argument("step: continuous move in a discrete room");
    answer = m->answer;
  }

  if (answer) {
    const bool correct = *answer == state.trial.label;
    out.reward = correct ? kCorrectReward : kIncorrectReward;
    next.outcome = correct ? Outcome::Correct : Outcome::Incorrect;
    next.done = true;
  } else if (const auto* v = std::get_if<ViewAction>(&action)) {
    if (!discrete()) throw std::invalid_argument("step: view action in the continuous room");
    if (v->location < 0 || v->location >= grid_.n_locations)
      throw std::invalid_argument("step: location index out of range");
    next.location = v->location;
    next.target = v->target;
    next.pose = view_pose(grid_, *state.scene, v->location, v->target);
  } else {
    const auto& m = std::get<MoveAction>(action);
    const auto clamp_t = [](double d) {
      return std::clamp(d, -kMaxTranslationStep, kMaxTranslationStep);
    };
    const auto clamp_r = [](double d) { return std::clamp(d, -kMaxRotationStep, kMaxRotationStep); };
    Pose p = state.pose;
    p.position += Vec3(clamp_t(m.dx), clamp_t(m.dy), clamp_t(m.dz));
    p.pitch = std::clamp(p.pitch + clamp_r(m.dpitch), -89.0, 89.0);
    p.yaw = wrap_degrees(p.yaw + clamp_r(m.dyaw));
    const Vec3 lo(0.0, 0.0, 0.0);
    const Vec3 hi(cfg_.width, cfg_.height, cfg_.depth);
    bool outside = false;
    for (int i = 0; i < 3; ++i) {
      if (p.position[i] < lo[i] || p.position[i] > hi[i]) {
        outside = true;
        p.position[i] = std::clamp(p.position[i], lo[i], hi[i]);
      }
    }
    if (outside) out.reward += kPenalty;
    if (!gaze_on_object(state, p)) out.reward += kPenalty;
    next.pose = p;
  }

  next.step_count = state.step_count + 1;
  next.action_history.push_back(action);
  const auto cap = static_cast<std::size_t>(cfg_.history_length);
  if (next.action_history.size() > cap)
    next.action_history.erase(next.action_history.begin(),
                              next.action_history.end() - static_cast<std::ptrdiff_t>(cap));
  if (!next.done && next.step_count >= cfg_.max_steps_per_episode) {
    next.done = true;
    next.outcome = Outcome::Timeout;
  }
  out.done = next.done;
  return out;
}

Observation Environment::observe(const EnvState& state) const {
  Observation obs;
  obs.frame = render(*state.scene, camera_for(state.pose));
  const int width = history_width();
  obs.history.assign(static_cast<std::size_t>(history_size()), 0.0f);
  // Slot 0 holds the most recent action.
  const int n = static_cast<int>(state.action_history.size());
  for (int slot = 0; slot < std::min(n, cfg_.history_length); ++slot) {
    const Action& a = state.action_history[n - 1 - slot];
    float* dst = obs.history.data() + static_cast<std::size_t>(slot) * width;
    if (discrete()) {
      dst[encode_policy_action(a)] = 1.0f;
    } else if (const auto* m = std::get_if<MoveAction>(&a)) {
      const auto c = [](double v, double lim) {
        return static_cast<float>(std::clamp(v, -lim, lim) / lim);
      };
      dst[0] = c(m->dx, kMaxTranslationStep);
      dst[1] = c(m->dy, kMaxTranslationStep);
      dst[2] = c(m->dz, kMaxTranslationStep);
      dst[3] = c(m->dpitch, kMaxRotationStep);
      dst[4] = c(m->dyaw, kMaxRotationStep);
    }
  }
  return obs;
}

std::uint64_t observation_hash(const Observation& obs) {
  std::uint64_t h = image_hash(obs.frame);
  for (float f : obs.history) {
    std::uint32_t bits = 0;
    std::memcpy(&bits, &f, sizeof bits);
    for (int shift = 0; shift < 32; shift += 8) {
      h ^= static_cast<std::uint8_t>(bits >> shift);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

// --- Metrics ---

double EpisodeMetrics::dominant_share() const {
  if (n_viewpoints == 0) return 0.0;
  int best = 0;
  for (const auto& [loc, count] : viewpoint_histogram) best = std::max(best, count);
  return static_cast<double>(best) / n_viewpoints;
}

EpisodeMetrics episode_metrics(const EpisodeTrace& trace) {
  if (trace.steps.empty() || !trace.steps.back().done)
    throw std::logic_error("episode_metrics: episode not finished");
  EpisodeMetrics m;
  m.correct = trace.outcome == Outcome::Correct;
  for (const auto& s : trace.steps) {
    if (const auto* v = std::get_if<ViewAction>(&s.action)) {
      ++m.n_viewpoints;
      ++m.viewpoint_histogram[v->location];
    }
  }
  return m;
}

// --- Serialization ---

nlohmann::json action_to_json(const Action& a) {
  if (const auto* v = std::get_if<ViewAction>(&a))
    return {{"view",
             {{"location", v->location}, {"target", v->target == Target::ObjectA ? "A" : "B"}}}};
  if (const auto* ans = std::get_if<AnswerAction>(&a)) return {{"answer", to_string(ans->answer)}};
  const auto& m = std::get<MoveAction>(a);
  nlohmann::json j = {{"dx", m.dx}, {"dy", m.dy}, {"dz", m.dz}, {"dpitch", m.dpitch}, {"dyaw", m.dyaw}};
  if (m.answer) j["answer"] = to_string(*m.answer);
  return {{"move", j}};
}

Action action_from_json(const nlohmann::json& j) {
  if (j.contains("view")) {
    const auto& v = j.at("view");
    const std::string target = v.at("target").get<std::string>();
    if (target != "A" && target != "B") throw std::invalid_argument("target must be A or B");
    return ViewAction{v.at("location").get<int>(), target == "A" ? Target::ObjectA : Target::ObjectB};
  }
  if (j.contains("answer")) return AnswerAction{label_from_string(j.at("answer").get<std::string>())};
  if (j.contains("move")) {
    const auto& v = j.at("move");
    MoveAction m;
    m.dx = v.value("dx", 0.0);
    m.dy = v.value("dy", 0.0);
    m.dz = v.value("dz", 0.0);
    m.dpitch = v.value("dpitch", 0.0);
    m.dyaw = v.value("dyaw", 0.0);
    if (v.contains("answer")) m.answer = label_from_string(v.at("answer").get<std::string>());
    return m;
  }
  throw std::invalid_argument("unrecognized action: " + j.dump());
}

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t parse_hex64(const std::string& s) { return std::stoull(s, nullptr, 16); }

nlohmann::json pose_to_json(const Pose& p) {
  return {{"x", p.position.x}, {"y", p.position.y}, {"z", p.position.z}, {"pitch", p.pitch}, {"yaw", p.yaw}};
}

Pose pose_from_json(const nlohmann::json& j) {
  Pose p;
  p.position = {j.at("x").get<double>(), j.at("y").get<double>(), j.at("z").get<double>()};
  p.pitch = j.at("pitch").get<double>();
  p.yaw = j.at("yaw").get<double>();
  return p;
}

Outcome outcome_from_string(const std::string& s) {
  if (s == "correct") return Outcome::Correct;
  if (s == "incorrect") return Outcome::Incorrect;
  if (s == "timeout") return Outcome::Timeout;
  return Outcome::None;
}

}  // namespace

std::string trace_to_jsonl(const EpisodeTrace& trace) {
  std::ostringstream out;
  nlohmann::json header = {{"format", "samediff-trace"},
                           {"version", 1},
                           {"env", trace.env_name},
                           {"image_width", trace.image_width},
                           {"image_height", trace.image_height},
                           {"max_steps_per_episode", trace.max_steps_per_episode},
                           {"trial", trial_to_json(trace.trial)},
                           {"initial_obs_hash", hex64(trace.initial_obs_hash)},
                           {"outcome", to_string(trace.outcome)}};
  out << header.dump() << '\n';
  for (std::size_t i = 0; i < trace.steps.size(); ++i) {
    const auto& s = trace.steps[i];
    nlohmann::json line = {{"step", i + 1},
                           {"action", action_to_json(s.action)},
                           {"reward", s.reward},
                           {"pose", pose_to_json(s.pose)},
                           {"done", s.done},
                           {"obs_hash", hex64(s.obs_hash)}};
    out << line.dump() << '\n';
  }
  return out.str();
}

EpisodeTrace trace_from_jsonl(const std::string& text, const ObjectSet& set) {
  std::istringstream in(text);
  std::string line;
  EpisodeTrace trace;
  bool have_header = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    if (!have_header) {
      if (j.value("format", "") != "samediff-trace")
        throw std::invalid_argument("trace: missing samediff-trace header");
      if (j.at("version").get<int>() != 1) throw std::invalid_argument("trace: unsupported version");
      trace.env_name = j.at("env").get<std::string>();
      trace.image_width = j.at("image_width").get<int>();
      trace.image_height = j.at("image_height").get<int>();
      trace.max_steps_per_episode = j.at("max_steps_per_episode").get<int>();
      trace.trial = trial_from_json(set, j.at("trial"));
      trace.initial_obs_hash = parse_hex64(j.at("initial_obs_hash").get<std::string>());
      trace.outcome = outcome_from_string(j.value("outcome", "none"));
      have_header = true;
      continue;
    }
    StepRecord s;
    s.action = action_from_json(j.at("action"));
    s.reward = j.at("reward").get<double>();
    s.pose = pose_from_json(j.at("pose"));
    s.done = j.at("done").get<bool>();
    s.obs_hash = parse_hex64(j.at("obs_hash").get<std::string>());
    trace.steps.push_back(std::move(s));
  }
  if (!have_header) throw std::invalid_argument("trace: empty input");
  return trace;
}

ReplayResult replay_trace(const EpisodeTrace& trace, const RoomConfig& base_cfg) {
  RoomConfig cfg = base_cfg;
  cfg.image_width = trace.image_width;
  cfg.image_height = trace.image_height;
  cfg.max_steps_per_episode = trace.max_steps_per_episode;
  const Environment env = Environment::from_name(trace.env_name, cfg);
  ReplayResult result;
  EnvState state = env.reset(trace.trial);
  result.observations.push_back(env.observe(state));
  if (observation_hash(result.observations.back()) != trace.initial_obs_hash)
    result.hashes_match = false;
  for (const auto& rec : trace.steps) {
    if (state.done) {
      result.rewards_match = false;
      break;
    }
    auto sr = env.step(state, rec.action);
    state = std::move(sr.state);
    result.observations.push_back(env.observe(state));
    if (sr.reward != rec.reward || sr.done != rec.done) result.rewards_match = false;
    if (observation_hash(result.observations.back()) != rec.obs_hash) result.hashes_match = false;
  }
  return result;
}

}  // namespace samediff
