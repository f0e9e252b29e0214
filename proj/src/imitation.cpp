#include "samediff/imitation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "samediff/nn/distributions.hpp"

namespace samediff {

using nn::Tensor;
using nn::Var;

void DemonstrationTrial::validate() const {
  if (samples.empty()) throw std::invalid_argument("demonstration has no samples");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    for (int k = 0; k < 3; ++k)
      if (!std::isfinite(s.head_position[k]) || !std::isfinite(s.gaze_target[k]))
        throw std::invalid_argument("demonstration sample " + std::to_string(i) + " is not finite");
    if (i > 0 && !(s.t > samples[i - 1].t))
      throw std::invalid_argument("demonstration timestamps must increase strictly (sample " +
                                  std::to_string(i) + ")");
  }
}

void DiscreteDemo::validate(const ViewpointGrid& grid) const {
  if (actions.empty() || dwell.size() != actions.size())
    throw std::invalid_argument("discrete demo: actions and dwell counts must be non-empty and aligned");
  for (std::size_t i = 0; i < actions.size(); ++i) {
    const bool last = i + 1 == actions.size();
    if (const auto* v = std::get_if<ViewAction>(&actions[i])) {
      if (last) throw std::invalid_argument("discrete demo must end with an answer");
      if (v->location < 0 || v->location >= grid.n_locations)
        throw std::invalid_argument("discrete demo: view location " + std::to_string(v->location) +
                                    " outside the grid");
    } else if (std::holds_alternative<AnswerAction>(actions[i])) {
      if (!last) throw std::invalid_argument("discrete demo: answer before the end");
    } else {
      throw std::invalid_argument("discrete demo: continuous action in a discrete record");
    }
  }
}

Label DiscreteDemo::answer() const { return std::get<AnswerAction>(actions.back()).answer; }

// --- Fixations ---

std::vector<Fixation> extract_fixations(const std::vector<GazeSample>& samples,
                                        const FixationConfig& cfg) {
  std::vector<Fixation> out;
  std::size_t start = 0;
  auto close_segment = [&](std::size_t first, std::size_t last) {
    const double duration = samples[last].t - samples[first].t + cfg.sample_period;
    if (duration + 1e-9 < cfg.min_duration) return;
    Fixation f{first, last, {}, {}};
    for (std::size_t i = first; i <= last; ++i) {
      f.head += samples[i].head_position;
      f.gaze += samples[i].gaze_target;
    }
    const double n = static_cast<double>(last - first + 1);
    f.head = f.head / n;
    f.gaze = f.gaze / n;
    out.push_back(f);
  };
  for (std::size_t i = 1; i <= samples.size(); ++i) {
    const bool breaks =
        i == samples.size() ||
        distance(samples[i].gaze_target, samples[start].gaze_target) > cfg.max_spread ||
        distance(samples[i].head_position, samples[start].head_position) > cfg.max_spread;
    if (breaks) {
      close_segment(start, i - 1);
      start = i;
    }
  }
  return out;
}

ViewAction snap_fixation(const Fixation& f, const ViewpointGrid& grid, const RoomConfig& cfg) {
  if (grid.locations.empty()) throw std::invalid_argument("snap_fixation: empty grid");
  int best = 0;
  double best_d = distance(f.head, grid.locations[0].position);
  for (int i = 1; i < grid.n_locations; ++i) {
    const double d = distance(f.head, grid.locations[i].position);
    if (d < best_d) {
      best = i;
      best_d = d;
    }
  }
  const double da = distance(f.gaze, cfg.anchor_a());
  const double db = distance(f.gaze, cfg.anchor_b());
  return {best, db < da ? Target::ObjectB : Target::ObjectA};
}

DiscreteDemo discretize_demo(const DemonstrationTrial& demo, const Environment& env,
                             const FixationConfig& cfg) {
  if (!env.discrete()) throw std::invalid_argument("discretize_demo: needs a discrete room");
  demo.validate();
  DiscreteDemo out;
  out.trial = demo.trial;
  out.env = env.name();
  for (const auto& f : extract_fixations(demo.samples, cfg)) {
    const ViewAction v = snap_fixation(f, env.grid(), env.config());
    const int samples = static_cast<int>(f.last - f.first + 1);
    if (!out.actions.empty() && std::get<ViewAction>(out.actions.back()) == v) {
      out.dwell.back() += samples;
    } else {
      out.actions.emplace_back(v);
      out.dwell.push_back(samples);
    }
  }
  out.actions.emplace_back(AnswerAction{demo.final_answer});
  out.dwell.push_back(1);
  return out;
}

DemonstrationTrial to_continuous(const DiscreteDemo& demo, const Environment& env) {
  if (!env.discrete()) throw std::invalid_argument("to_continuous: needs a discrete room");
  demo.validate(env.grid());
  DemonstrationTrial out;
  out.trial = demo.trial;
  out.final_answer = demo.answer();
  long long k = 0;
  for (std::size_t i = 0; i + 1 < demo.actions.size(); ++i) {
    const auto& v = std::get<ViewAction>(demo.actions[i]);
    const Vec3 head = env.grid().locations[v.location].position;
    const Vec3 gaze = v.target == Target::ObjectA ? env.config().anchor_a() : env.config().anchor_b();
    for (int s = 0; s < demo.dwell[i]; ++s, ++k)
      out.samples.push_back({static_cast<double>(k) / kDemoSampleRate, head, gaze});
  }
  return out;
}

// --- Synthetic demos ---

std::vector<SyntheticDemo> synthesize_demos_with_script(const ObjectSet& set,
                                                        const Environment& env, int n, Rng& rng,
                                                        const SynthConfig& cfg) {
  if (n <= 0) throw std::invalid_argument("synthesize_demos: n must be positive");
  if (!env.discrete()) throw std::invalid_argument("synthesize_demos: needs a discrete room");
  const auto& grid = env.grid();
  const int max_views = std::min(cfg.max_views, grid.n_locations);
  const int min_views = std::min(cfg.min_views, max_views);
  const double dt = 1.0 / kDemoSampleRate;
  const Vec3 anchors[2] = {env.config().anchor_a(), env.config().anchor_b()};
  std::vector<SyntheticDemo> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    // Balanced cycle over label x difficulty x orientation.
    const int combo = i % 18;
    const Label label = combo % 2 == 0 ? Label::Same : Label::Different;
    const Difficulty d = kAllDifficulties[(combo / 2) % 3];
    const int ro = kTestedOrientations[combo / 6];
    SyntheticDemo sd;
    sd.demo.trial = make_trial(set, d, ro, label, rng);
    const bool same = congruence_check(
        sd.demo.trial.object_a, rotate(sd.demo.trial.object_b, sd.demo.trial.rotation_b));
    const bool wrong = rng.bernoulli(cfg.error_rate);
    sd.demo.final_answer = (same != wrong) ? Label::Same : Label::Different;

    std::vector<int> locations(grid.n_locations);
    for (int k = 0; k < grid.n_locations; ++k) locations[k] = k;
    rng.shuffle(locations.begin(), locations.end());
    const int views = rng.uniform_int(min_views, max_views);
    Target target = rng.bernoulli(0.5) ? Target::ObjectA : Target::ObjectB;
    long long k = 0;
    for (int v = 0; v < views; ++v) {
      const ViewAction view{locations[v], target};
      sd.script.push_back(view);
      const Vec3 head = grid.locations[view.location].position;
      const Vec3 gaze = anchors[target == Target::ObjectA ? 0 : 1];
      const int dwell = static_cast<int>(std::ceil(rng.uniform(cfg.min_dwell, cfg.max_dwell) / dt));
      for (int s = 0; s < dwell; ++s, ++k) sd.demo.samples.push_back({k * dt, head, gaze});
      if (v + 1 == views) break;
      // Walk to the next location while the gaze sweeps a circle between
      // the two targets.
      const Target next_target = target == Target::ObjectA ? Target::ObjectB : Target::ObjectA;
      const Vec3 next_head = grid.locations[locations[v + 1]].position;
      const Vec3 next_gaze = anchors[next_target == Target::ObjectA ? 0 : 1];
      const double duration =
          std::max(cfg.min_transition, distance(head, next_head) / cfg.walk_speed);
      const int steps = static_cast<int>(std::ceil(duration / dt));
      for (int s = 1; s <= steps; ++s, ++k) {
        const double u = static_cast<double>(s) / (steps + 1);
        const double phase = 2.0 * kPi * cfg.sweep_hz * s * dt;
        const Vec3 sweep(cfg.sweep_radius * std::cos(phase), cfg.sweep_radius * std::sin(phase), 0.0);
        sd.demo.samples.push_back(
            {k * dt, head + (next_head - head) * u, gaze + (next_gaze - gaze) * u + sweep});
      }
      target = next_target;
    }
    out.push_back(std::move(sd));
  }
  return out;
}

std::vector<DemonstrationTrial> synthesize_demos(const ObjectSet& set, const Environment& env,
                                                 int n, Rng& rng, const SynthConfig& cfg) {
  std::vector<DemonstrationTrial> out;
  for (auto& s : synthesize_demos_with_script(set, env, n, rng, cfg)) out.push_back(std::move(s.demo));
  return out;
}

// --- Files ---

EpisodeTrace demo_to_trace(const DiscreteDemo& demo, const Environment& env) {
  demo.validate(env.grid());
  EpisodeTrace trace;
  trace.env_name = env.name();
  trace.image_width = env.config().image_width;
  trace.image_height = env.config().image_height;
  trace.max_steps_per_episode = env.config().max_steps_per_episode;
  trace.trial = demo.trial;
  EnvState state = env.reset(demo.trial);
  trace.initial_obs_hash = observation_hash(env.observe(state));
  for (std::size_t i = 0; i < demo.actions.size(); ++i) {
    if (state.done) throw std::invalid_argument("demo continues after the episode ended");
    auto r = env.step(state, demo.actions[i]);
    state = std::move(r.state);
    trace.steps.push_back({demo.actions[i], r.reward, state.pose, r.done,
                           observation_hash(env.observe(state))});
  }
  trace.outcome = state.outcome;
  return trace;
}


namespace {
nlohmann::json vec_json(const Vec3& v) { return {v.x, v.y, v.z}; }
Vec3 vec_from(const nlohmann::json& j) {
  return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()};
}
}  // namespace

nlohmann::json demo_to_json(const DemonstrationTrial& d) {
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& s : d.samples)
    samples.push_back({{"t", s.t}, {"head", vec_json(s.head_position)}, {"gaze", vec_json(s.gaze_target)}});
  return {{"format", "continuous"},
          {"trial", trial_to_json(d.trial)},
          {"samples", samples},
          {"final_answer", to_string(d.final_answer)}};
}

nlohmann::json demo_to_json(const DiscreteDemo& d) {
  nlohmann::json actions = nlohmann::json::array();
  for (const auto& a : d.actions) actions.push_back(action_to_json(a));
  return {{"format", "discrete"},
          {"env", d.env},
          {"trial", trial_to_json(d.trial)},
          {"actions", actions},
          {"dwell", d.dwell}};
}

DemoRecord demo_from_json(const nlohmann::json& j, const ObjectSet& set) {
  DemoRecord r;
  const std::string format = j.at("format").get<std::string>();
  if (format == "continuous") {
    DemonstrationTrial d;
    d.trial = trial_from_json(set, j.at("trial"));
    for (const auto& s : j.at("samples"))
      d.samples.push_back({s.at("t").get<double>(), vec_from(s.at("head")), vec_from(s.at("gaze"))});
    d.final_answer = label_from_string(j.at("final_answer").get<std::string>());
    d.validate();
    r.continuous = std::move(d);
  } else if (format == "discrete") {
    DiscreteDemo d;
    d.env = j.at("env").get<std::string>();
    d.trial = trial_from_json(set, j.at("trial"));
    for (const auto& a : j.at("actions")) d.actions.push_back(action_from_json(a));
    d.dwell = j.at("dwell").get<std::vector<int>>();
    d.validate(Environment::from_name(d.env).grid());
    r.discrete = std::move(d);
  } else {
    throw std::invalid_argument("unknown demo format '" + format + "'");
  }
  return r;
}

std::string demo_file_header(std::uint64_t object_seed) {
  return nlohmann::json{{"format", "samediff-demos"}, {"version", 1}, {"object_seed", object_seed}}
      .dump();
}

std::vector<DemoRecord> read_demo_file(const std::string& path, const ObjectSet& set) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open demo file " + path);
  std::string line;
  std::vector<DemoRecord> out;
  bool header = false;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (!header) {
        if (j.value("format", "") != "samediff-demos" || j.value("version", 0) != 1)
          throw std::invalid_argument("missing or unsupported demo file header");
        header = true;
        continue;
      }
      out.push_back(demo_from_json(j, set));
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!header) throw std::runtime_error(path + ": empty demo file");
  return out;
}

void write_demo_file(const std::string& path, const std::vector<DemoRecord>& records,
                     std::uint64_t object_seed) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write demo file " + path);
  f << demo_file_header(object_seed) << '\n';
  for (const auto& r : records) {
    if (r.continuous) f << demo_to_json(*r.continuous).dump() << '\n';
    if (r.discrete) f << demo_to_json(*r.discrete).dump() << '\n';
  }
}

// --- Behavioral cloning ---

nn::ObsBatch DemoDataset::select(const std::vector<int>& rows, std::vector<int>* actions_out) const {
  nn::ObsBatch b;
  const int n = static_cast<int>(rows.size());
  std::vector<int> fshape = obs.frames.shape, hshape = obs.history.shape;
  fshape[0] = n;
  hshape[0] = n;
  b.frames = Tensor(fshape);
  b.history = Tensor(hshape);
  const std::size_t fs = obs.frames.size() / obs.frames.dim(0);
  const std::size_t hs = obs.history.size() / obs.history.dim(0);
  for (int i = 0; i < n; ++i) {
    std::copy_n(obs.frames.ptr() + rows[i] * fs, fs, b.frames.ptr() + i * fs);
    std::copy_n(obs.history.ptr() + rows[i] * hs, hs, b.history.ptr() + i * hs);
    if (actions_out) actions_out->push_back(actions[rows[i]]);
  }
  return b;
}

DemoDataset build_demo_dataset(const std::vector<DiscreteDemo>& demos, const Environment& env,
                               int channels) {
  if (demos.empty()) throw std::invalid_argument("build_demo_dataset: no demonstrations");
  std::vector<float> frames, history;
  DemoDataset ds;
  const int h = env.config().image_height, w = env.config().image_width;
  const std::size_t fs = static_cast<std::size_t>(h) * w * channels;
  for (const auto& d : demos) {
    d.validate(env.grid());
    EnvState s = env.reset(d.trial);
    for (const auto& a : d.actions) {
      const Observation o = env.observe(s);
      const std::size_t at = frames.size();
      frames.resize(at + fs);
      nn::frame_to_input(o.frame, channels, frames.data() + at);
      history.insert(history.end(), o.history.begin(), o.history.end());
      ds.actions.push_back(env.encode_policy_action(a));
      s = env.step(s, a).state;
    }
  }
  const int n = ds.size();
  ds.obs.frames = Tensor({n, h, w, channels}, std::move(frames));
  ds.obs.history = Tensor({n, env.history_size()}, std::move(history));
  return ds;
}

Var bc_loss(const nn::PolicyValueNet& net, const nn::ObsBatch& obs, const std::vector<int>& actions) {
  const int k = net.shape().actions;
  for (int a : actions)
    if (a < 0 || a >= k)
      throw std::out_of_range("bc_loss: demo action " + std::to_string(a) + " outside [0, " +
                              std::to_string(k) + ")");
  const auto out = net.forward(obs);
  return nn::scale(nn::mean(nn::gather_cols(nn::log_softmax(out.logits), actions)), -1.0f);
}

// --- Adversarial imitation ---

float gail_reward_from_logit(float logit) {
  // -log(1 - sigmoid(x)) = softplus(x)
  const float sp = std::max(logit, 0.0f) + std::log1p(std::exp(-std::abs(logit)));
  return std::clamp(sp, 0.0f, 10.0f);
}

std::vector<float> gail_reward(const nn::Discriminator& d, const Tensor& frames) {
  nn::NoGradGuard no_grad;
  const Var logits = d.forward(frames);
  std::vector<float> r;
  r.reserve(logits.value().size());
  for (float l : logits.value().data) r.push_back(gail_reward_from_logit(l));
  return r;
}

GailStats gail_update(const nn::Discriminator& d, nn::Adam& adam, const Tensor& policy_frames,
                      const Tensor& demo_frames) {
  if (demo_frames.rank() == 0 || demo_frames.dim(0) == 0)
    throw std::invalid_argument("gail_update: empty demonstration batch");
  if (policy_frames.rank() == 0 || policy_frames.dim(0) == 0)
    throw std::invalid_argument("gail_update: empty policy batch");
  const Var ld = d.forward(demo_frames);
  const Var lp = d.forward(policy_frames);
  // demos -> 1: softplus(-x); policy -> 0: softplus(x)
  const Var loss = nn::add(nn::mean(nn::softplus(nn::scale(ld, -1.0f))), nn::mean(nn::softplus(lp)));
  GailStats st;
  st.loss = loss.item();
  int correct = 0;
  for (float x : ld.value().data) correct += x > 0.0f;
  for (float x : lp.value().data) correct += x < 0.0f;
  st.accuracy = static_cast<double>(correct) / (ld.value().size() + lp.value().size());
  adam.zero_grad();
  nn::backward(loss);
  adam.step();
  return st;
}

TrainHooks bc_hooks(const nn::PolicyValueNet& net, const DemoDataset& demos, const BCConfig& cfg,
                    Rng& rng) {
  if (demos.size() == 0) throw std::invalid_argument("bc_hooks: empty demonstration set");
  TrainHooks h;
  auto steps_seen = std::make_shared<long long>(0);
  h.on_rollout = [steps_seen](Rollout& r) { *steps_seen += r.size(); };
  h.aux.weight = cfg.strength;
  const int pool = cfg.samples_per_update > 0 ? std::min(cfg.samples_per_update, demos.size())
                                              : demos.size();
  h.aux.loss = [&net, &demos, &rng, cfg, pool, steps_seen]() -> Var {
    if (cfg.steps > 0 && *steps_seen > cfg.steps) return Var();
    std::vector<int> rows;
    const int n = std::min(cfg.batch_size, pool);
    for (int i = 0; i < n; ++i) rows.push_back(static_cast<int>(rng.uniform_int(pool)));
    std::vector<int> actions;
    const auto obs = demos.select(rows, &actions);
    return bc_loss(net, obs, actions);
  };
  return h;
}

TrainHooks gail_hooks(const nn::Discriminator& d, nn::Adam& adam, const DemoDataset& demos,
                      const GAILConfig& cfg, Rng& rng) {
  if (demos.size() == 0) throw std::invalid_argument("gail_hooks: empty demonstration set");
  if (cfg.use_actions || cfg.use_vail)
    throw std::invalid_argument("gail_hooks: action-conditioned and variational discriminators are not supported");
  TrainHooks h;
  h.on_rollout = [&d, &adam, &demos, &rng, cfg](Rollout& r) {
    const auto reward = gail_reward(d, r.obs.frames);
    for (int i = 0; i < r.size(); ++i) {
      const float extrinsic = cfg.mix_extrinsic ? r.rewards[i] : 0.0f;
      r.rewards[i] = extrinsic + cfg.strength * reward[i];
    }
    // One pass over the rollout against random demo minibatches.
    std::vector<int> order(r.size());
    for (int i = 0; i < r.size(); ++i) order[i] = i;
    rng.shuffle(order.begin(), order.end());
    const std::size_t fs = r.obs.frames.size() / r.obs.frames.dim(0);
    for (int start = 0; start < r.size(); start += cfg.batch_size) {
      const int n = std::min(cfg.batch_size, r.size() - start);
      std::vector<int> shape = r.obs.frames.shape;
      shape[0] = n;
      Tensor pf(shape);
      for (int i = 0; i < n; ++i)
        std::copy_n(r.obs.frames.ptr() + order[start + i] * fs, fs, pf.ptr() + i * fs);
      std::vector<int> rows;
      for (int i = 0; i < n; ++i) rows.push_back(static_cast<int>(rng.uniform_int(demos.size())));
      const auto demo_obs = demos.select(rows, nullptr);
      gail_update(d, adam, pf, demo_obs.frames);
    }
  };
  return h;
}

}  // namespace samediff
