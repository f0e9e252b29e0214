#include "samediff/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <nlohmann/json.hpp>

#include "samediff/nn/distributions.hpp"
#include "samediff/png_io.hpp"

namespace samediff {

using nlohmann::json;

std::string_view to_string(Method m) {
  switch (m) {
    case Method::PPO:
      return "ppo";
    case Method::BC:
      return "bc";
    case Method::GAIL:
      return "gail";
    case Method::Curriculum:
      return "curriculum";
  }
  return "?";
}

Method method_from_string(std::string_view s) {
  if (s == "ppo") return Method::PPO;
  if (s == "bc") return Method::BC;
  if (s == "gail") return Method::GAIL;
  if (s == "curriculum") return Method::Curriculum;
  throw std::invalid_argument("unknown method: " + std::string(s));
}

// --- Config ---

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

long long parse_int(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  long long out = 0;
  try {
    out = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size())
    throw std::invalid_argument(key + ": expected an integer, got '" + v + "'");
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size() || !std::isfinite(out))
    throw std::invalid_argument(key + ": expected a number, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument(key + ": expected true or false, got '" + v + "'");
}

std::vector<std::uint64_t> parse_seeds(const std::string& key, std::string v) {
  if (!v.empty() && v.front() == '[') {
    if (v.back() != ']') throw std::invalid_argument(key + ": unterminated list");
    v = v.substr(1, v.size() - 2);
  }
  std::vector<std::uint64_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    const long long s = parse_int(key, item);
    if (s < 0) throw std::invalid_argument(key + ": seeds must be non-negative");
    out.push_back(static_cast<std::uint64_t>(s));
  }
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    auto integer = [](auto member) {
      return [member](RunConfig& c, const std::string& k, const std::string& v) {
        c.*member = static_cast<std::remove_reference_t<decltype(c.*member)>>(parse_int(k, v));
      };
    };
    t["method"] = [](RunConfig& c, const std::string&, const std::string& v) {
      c.method = method_from_string(v);
    };
    t["plan"] = [](RunConfig& c, const std::string&, const std::string& v) { c.plan = v; };
    t["env"] = [](RunConfig& c, const std::string&, const std::string& v) { c.env = v; };
    t["seeds"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.seeds = parse_seeds(k, v);
    };
    t["episode_budget"] = integer(&RunConfig::episode_budget);
    t["plateau_window"] = integer(&RunConfig::plateau_window);
    t["resolution"] = integer(&RunConfig::resolution);
    t["output_dir"] = [](RunConfig& c, const std::string&, const std::string& v) {
      c.output_dir = v;
    };
    t["n_envs"] = integer(&RunConfig::n_envs);
    t["channels"] = integer(&RunConfig::channels);
    t["log_every"] = integer(&RunConfig::log_every);
    t["max_steps_per_episode"] = integer(&RunConfig::max_steps_per_episode);
    t["object_seed"] = integer(&RunConfig::object_seed);
    t["eval_trials"] = integer(&RunConfig::eval_trials);
    t["jobs"] = integer(&RunConfig::jobs);
    t["forgetting"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.forgetting = parse_bool(k, v);
    };
    t["demos_path"] = [](RunConfig& c, const std::string&, const std::string& v) {
      c.demos_path = v;
    };
    t["n_demos"] = integer(&RunConfig::n_demos);

    auto ppo_int = [](int PPOConfig::*m) {
      return [m](RunConfig& c, const std::string& k, const std::string& v) {
        c.ppo.*m = static_cast<int>(parse_int(k, v));
      };
    };
    auto ppo_real = [](float PPOConfig::*m) {
      return [m](RunConfig& c, const std::string& k, const std::string& v) {
        c.ppo.*m = static_cast<float>(parse_real(k, v));
      };
    };
    t["ppo.batch_size"] = ppo_int(&PPOConfig::batch_size);
    t["ppo.buffer_size"] = ppo_int(&PPOConfig::buffer_size);
    t["ppo.num_epoch"] = ppo_int(&PPOConfig::num_epoch);
    t["ppo.beta"] = ppo_real(&PPOConfig::beta);
    t["ppo.epsilon"] = ppo_real(&PPOConfig::epsilon);
    t["ppo.lambda"] = ppo_real(&PPOConfig::lambda);
    t["ppo.gamma"] = ppo_real(&PPOConfig::gamma);
    t["ppo.lr"] = ppo_real(&PPOConfig::lr);
    t["ppo.reward_strength"] = ppo_real(&PPOConfig::reward_strength);
    t["ppo.value_coef"] = ppo_real(&PPOConfig::value_coef);
    t["ppo.max_steps"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.ppo.max_steps = parse_int(k, v);
    };

    t["curriculum.window"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.curriculum.window = static_cast<int>(parse_int(k, v));
    };
    t["curriculum.threshold"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.curriculum.threshold = parse_real(k, v);
    };
    t["curriculum.max_episodes_per_lesson"] = [](RunConfig& c, const std::string& k,
                                                 const std::string& v) {
      c.curriculum.max_episodes_per_lesson = parse_int(k, v);
    };

    t["bc.strength"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.bc.strength = static_cast<float>(parse_real(k, v));
    };
    t["bc.steps"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.bc.steps = parse_int(k, v);
    };
    t["bc.batch_size"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.bc.batch_size = static_cast<int>(parse_int(k, v));
    };
    t["bc.num_epoch"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.bc.num_epoch = static_cast<int>(parse_int(k, v));
    };
    t["bc.samples_per_update"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.bc.samples_per_update = static_cast<int>(parse_int(k, v));
    };

    t["gail.strength"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.gail.strength = static_cast<float>(parse_real(k, v));
    };
    t["gail.gamma"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.gail.gamma = static_cast<float>(parse_real(k, v));
    };
    t["gail.lr"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.gail.lr = static_cast<float>(parse_real(k, v));
    };
    t["gail.batch_size"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.gail.batch_size = static_cast<int>(parse_int(k, v));
    };
    t["gail.use_actions"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.gail.use_actions = parse_bool(k, v);
    };
    t["gail.use_vail"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.gail.use_vail = parse_bool(k, v);
    };
    t["gail.mix_extrinsic"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.gail.mix_extrinsic = parse_bool(k, v);
    };
    return t;
  }();
  return table;
}

}  // namespace

std::map<std::string, std::string> parse_flat_config(const std::string& text) {
  std::map<std::string, std::string> out;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    // Strip a comment that is not inside quotes.
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        line.resize(i);
        break;
      }
    }
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty key");
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"')
      value = value.substr(1, value.size() - 2);
    out[key] = value;
  }
  return out;
}

void apply_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto& t = setters();
  const auto it = t.find(key);
  if (it == t.end()) throw std::invalid_argument("unknown config key: " + key);
  it->second(cfg, key, value);
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
  RunConfig cfg;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot read config file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    for (const auto& [k, v] : parse_flat_config(ss.str())) apply_config_value(cfg, k, v);
  }
  for (const auto& o : overrides) {
    const auto parsed = parse_flat_config(o);
    if (parsed.empty()) throw std::invalid_argument("empty override");
    for (const auto& [k, v] : parsed) apply_config_value(cfg, k, v);
  }
  cfg.validate();
  return cfg;
}

RoomConfig RunConfig::room() const {
  RoomConfig r;
  r.image_width = resolution;
  r.image_height = resolution;
  r.max_steps_per_episode = max_steps_per_episode;
  return r;
}

void RunConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("config: " + m); };
  if (seeds.empty()) fail("seeds must not be empty");
  if (method == Method::Curriculum) {
    if (plan.empty()) fail("curriculum needs a plan (naive, human or human_text)");
    plan_by_name(plan);
  }
  if (episode_budget <= 0) fail("episode_budget must be positive");
  if (plateau_window < 0) fail("plateau_window must be >= 0");
  if (resolution < 13 || resolution > kMaxImageSide) fail("resolution must lie in [13, 512]");
  if (n_envs < 1) fail("n_envs must be >= 1");
  if (channels != 1 && channels != 4) fail("channels must be 1 or 4");
  if (log_every < 1) fail("log_every must be >= 1");
  if (eval_trials < 1) fail("eval_trials must be >= 1");
  if (jobs < 1) fail("jobs must be >= 1");
  if (output_dir.empty()) fail("output_dir must not be empty");
  if (curriculum.window < 1) fail("curriculum.window must be >= 1");
  if (bc.strength < 0 || gail.strength < 0) fail("imitation strengths must be >= 0");
  if (n_demos < 1) fail("n_demos must be >= 1");
  ppo.validate();
  const Environment e = Environment::from_name(env, room());
  if ((method == Method::BC || method == Method::GAIL) && !e.discrete())
    fail("bc and gail need a discrete environment (demos are snapped to a grid)");
}

json RunConfig::to_json() const {
  return {{"method", to_string(method)},
          {"plan", plan},
          {"env", env},
          {"seeds", seeds},
          {"episode_budget", episode_budget},
          {"plateau_window", plateau_window},
          {"resolution", resolution},
          {"output_dir", output_dir},
          {"n_envs", n_envs},
          {"channels", channels},
          {"log_every", log_every},
          {"max_steps_per_episode", max_steps_per_episode},
          {"object_seed", object_seed},
          {"eval_trials", eval_trials},
          {"jobs", jobs},
          {"forgetting", forgetting},
          {"demos_path", demos_path},
          {"n_demos", n_demos},
          {"ppo",
           {{"batch_size", ppo.batch_size},
            {"buffer_size", ppo.buffer_size},
            {"beta", ppo.beta},
            {"epsilon", ppo.epsilon},
            {"lambda", ppo.lambda},
            {"gamma", ppo.gamma},
            {"lr", ppo.lr},
            {"reward_strength", ppo.reward_strength},
            {"max_steps", ppo.max_steps},
            {"num_epoch", ppo.num_epoch},
            {"value_coef", ppo.value_coef}}},
          {"curriculum",
           {{"window", curriculum.window},
            {"threshold", curriculum.threshold},
            {"max_episodes_per_lesson", curriculum.max_episodes_per_lesson}}},
          {"bc",
           {{"strength", bc.strength},
            {"steps", bc.steps},
            {"batch_size", bc.batch_size},
            {"num_epoch", bc.num_epoch},
            {"samples_per_update", bc.samples_per_update}}},
          {"gail",
           {{"strength", gail.strength},
            {"gamma", gail.gamma},
            {"lr", gail.lr},
            {"use_actions", gail.use_actions},
            {"use_vail", gail.use_vail},
            {"batch_size", gail.batch_size},
            {"mix_extrinsic", gail.mix_extrinsic}}}};
}

// --- Evaluation ---

EvalPolicy network_policy(const nn::PolicyValueNet& net, int channels, bool stochastic,
                          std::uint64_t seed) {
  auto rng = std::make_shared<Rng>(seed);
  return [&net, channels, stochastic, rng](const Environment& env,
                                           const std::vector<const EnvState*>& states,
                                           std::vector<int>& actions) {
    const int n = static_cast<int>(states.size());
    const auto& s = net.shape();
    nn::ObsBatch obs;
    obs.frames = nn::Tensor({n, s.height, s.width, s.channels});
    obs.history = nn::Tensor({n, s.history});
    const std::size_t fs = static_cast<std::size_t>(s.height) * s.width * s.channels;
    for (int i = 0; i < n; ++i) {
      const Observation o = env.observe(*states[i]);
      nn::frame_to_input(o.frame, channels, obs.frames.ptr() + i * fs);
      std::copy(o.history.begin(), o.history.end(), obs.history.ptr() + i * s.history);
    }
    nn::NoGradGuard guard;
    const auto out = net.forward(obs);
    actions.resize(n);
    for (int i = 0; i < n; ++i) {
      const auto row = nn::row(out.logits.value(), i);
      actions[i] = stochastic ? nn::sample(row, *rng) : nn::argmax(row);
    }
  };
}

std::vector<Trial> balanced_trials(const ObjectSet& set, int n, Rng& rng) {
  struct Combo {
    Label label;
    Difficulty difficulty;
    int ro;
  };
  std::vector<Combo> combos;
  for (Label l : {Label::Same, Label::Different})
    for (Difficulty d : kAllDifficulties)
      for (int ro : kTestedOrientations) combos.push_back({l, d, ro});
  std::vector<Combo> plan;
  plan.reserve(n);
  for (int i = 0; i < n; ++i) {
    // Shuffle each full cycle so a truncated last cycle stays unbiased.
    if (i % static_cast<int>(combos.size()) == 0) rng.shuffle(combos.begin(), combos.end());
    plan.push_back(combos[i % combos.size()]);
  }
  rng.shuffle(plan.begin(), plan.end());
  std::vector<Trial> out;
  out.reserve(n);
  for (const auto& c : plan) out.push_back(make_trial(set, c.difficulty, c.ro, c.label, rng));
  return out;
}

namespace {

std::string condition_key(const Trial& t) {
  return std::string(to_string(t.difficulty)) + "/" + std::to_string(t.ro_deg);
}

}  // namespace

EvalReport evaluate(const Environment& env, const ObjectSet& set, const EvalPolicy& policy,
                    const EvalOptions& opt) {
  if (opt.n_trials < 1) throw std::invalid_argument("evaluate: n_trials must be >= 1");
  if (opt.batch < 1) throw std::invalid_argument("evaluate: batch must be >= 1");
  Rng rng(opt.seed);
  const auto trials = balanced_trials(set, opt.n_trials, rng);

  EvalReport rep;
  rep.env = env.name();
  rep.n_trials = opt.n_trials;
  std::map<std::string, std::pair<int, int>> by_condition;  // correct, total
  if (opt.record_traces) rep.traces.resize(trials.size());

  struct Slot {
    int trial = -1;
    EnvState state;
  };
  std::vector<Slot> slots(std::min<std::size_t>(opt.batch, trials.size()));
  std::size_t next = 0;
  auto start = [&](Slot& s) {
    if (next >= trials.size()) {
      s.trial = -1;
      return;
    }
    s.trial = static_cast<int>(next);
    s.state = env.reset(trials[next]);
    if (opt.record_traces) {
      auto& tr = rep.traces[next];
      tr.env_name = env.name();
      tr.image_width = env.config().image_width;
      tr.image_height = env.config().image_height;
      tr.max_steps_per_episode = env.config().max_steps_per_episode;
      tr.trial = trials[next];
      tr.initial_obs_hash = observation_hash(env.observe(s.state));
    }
    ++next;
  };
  for (auto& s : slots) start(s);

  std::vector<const EnvState*> active;
  std::vector<Slot*> active_slots;
  std::vector<int> actions;
  while (true) {
    active.clear();
    active_slots.clear();
    for (auto& s : slots)
      if (s.trial >= 0) {
        active.push_back(&s.state);
        active_slots.push_back(&s);
      }
    if (active.empty()) break;
    actions.clear();
    policy(env, active, actions);
    if (actions.size() != active.size())
      throw std::logic_error("evaluate: policy returned the wrong number of actions");
    for (std::size_t i = 0; i < active_slots.size(); ++i) {
      Slot& s = *active_slots[i];
      const Action a = env.decode_policy_action(actions[i]);
      auto r = env.step(s.state, a);
      s.state = std::move(r.state);
      if (const auto* v = std::get_if<ViewAction>(&a)) {
        ++rep.total_viewpoints;
        ++rep.histogram[v->location];
      }
      if (opt.record_traces) {
        StepRecord rec;
        rec.action = a;
        rec.reward = r.reward;
        rec.pose = s.state.pose;
        rec.done = r.done;
        rec.obs_hash = observation_hash(env.observe(s.state));
        rep.traces[s.trial].steps.push_back(rec);
      }
      if (!r.done) continue;
      const Trial& t = trials[s.trial];
      const bool correct = s.state.outcome == Outcome::Correct;
      rep.n_correct += correct;
      rep.n_timeouts += s.state.outcome == Outcome::Timeout;
      auto& c = by_condition[condition_key(t)];
      c.first += correct;
      c.second += 1;
      if (opt.record_traces) rep.traces[s.trial].outcome = s.state.outcome;
      start(s);
    }
  }

  rep.accuracy = 100.0 * rep.n_correct / rep.n_trials;
  rep.mean_viewpoints = static_cast<double>(rep.total_viewpoints) / rep.n_trials;
  rep.timeout_rate = static_cast<double>(rep.n_timeouts) / rep.n_trials;
  long long top = 0;
  for (const auto& [loc, n] : rep.histogram) top = std::max(top, n);
  rep.dominant_share =
      rep.total_viewpoints > 0 ? static_cast<double>(top) / rep.total_viewpoints : 0.0;
  for (const auto& [k, c] : by_condition)
    rep.accuracy_by_condition[k] = 100.0 * c.first / c.second;
  return rep;
}

json report_to_json(const EvalReport& r) {
  json hist = json::object();
  for (const auto& [loc, n] : r.histogram) hist[std::to_string(loc)] = n;
  return {{"schema", "samediff-eval"},
          {"version", 1},
          {"env", r.env},
          {"n_trials", r.n_trials},
          {"n_correct", r.n_correct},
          {"n_timeouts", r.n_timeouts},
          {"total_viewpoints", r.total_viewpoints},
          {"accuracy", r.accuracy},
          {"mean_viewpoints", r.mean_viewpoints},
          {"timeout_rate", r.timeout_rate},
          {"dominant_share", r.dominant_share},
          {"histogram", hist},
          {"accuracy_by_condition", r.accuracy_by_condition}};
}

void validate_report_json(const json& j) {
  auto fail = [](const std::string& m) { throw std::invalid_argument("eval report: " + m); };
  if (!j.is_object()) fail("not an object");
  if (j.value("schema", "") != "samediff-eval") fail("schema tag missing");
  if (j.value("version", 0) != 1) fail("unsupported version");
  for (const char* k : {"n_trials", "n_correct", "n_timeouts", "total_viewpoints"})
    if (!j.contains(k) || !j[k].is_number_integer()) fail(std::string(k) + " must be an integer");
  for (const char* k : {"accuracy", "mean_viewpoints", "timeout_rate", "dominant_share"})
    if (!j.contains(k) || !j[k].is_number()) fail(std::string(k) + " must be a number");
  if (!j.contains("env") || !j["env"].is_string()) fail("env must be a string");
  if (!j.contains("histogram") || !j["histogram"].is_object()) fail("histogram must be an object");
  if (!j.contains("accuracy_by_condition") || !j["accuracy_by_condition"].is_object())
    fail("accuracy_by_condition must be an object");

  const long long n = j["n_trials"], correct = j["n_correct"], timeouts = j["n_timeouts"];
  const long long views = j["total_viewpoints"];
  if (n < 1) fail("n_trials must be positive");
  if (correct < 0 || correct > n) fail("n_correct out of range");
  if (timeouts < 0 || timeouts + correct > n) fail("n_timeouts out of range");
  const double acc = j["accuracy"];
  if (acc < 0 || acc > 100) fail("accuracy outside [0, 100]");
  if (std::abs(acc - 100.0 * correct / n) > 1e-9) fail("accuracy disagrees with counts");
  long long sum = 0, top = 0;
  for (const auto& [k, v] : j["histogram"].items()) {
    if (!v.is_number_integer() || v.get<long long>() < 0) fail("histogram counts must be >= 0");
    sum += v.get<long long>();
    top = std::max(top, v.get<long long>());
  }
  if (sum != views) fail("histogram does not sum to total_viewpoints");
  const double share = j["dominant_share"];
  const double expect = views > 0 ? static_cast<double>(top) / views : 0.0;
  if (std::abs(share - expect) > 1e-9) fail("dominant_share disagrees with histogram");
  const double tr = j["timeout_rate"];
  if (tr < 0 || tr > 1) fail("timeout_rate outside [0, 1]");
}

EvalReport report_from_json(const json& j) {
  validate_report_json(j);
  EvalReport r;
  r.env = j["env"];
  r.n_trials = j["n_trials"];
  r.n_correct = j["n_correct"];
  r.n_timeouts = j["n_timeouts"];
  r.total_viewpoints = j["total_viewpoints"];
  r.accuracy = j["accuracy"];
  r.mean_viewpoints = j["mean_viewpoints"];
  r.timeout_rate = j["timeout_rate"];
  r.dominant_share = j["dominant_share"];
  for (const auto& [k, v] : j["histogram"].items()) r.histogram[std::stoi(k)] = v;
  for (const auto& [k, v] : j["accuracy_by_condition"].items()) r.accuracy_by_condition[k] = v;
  return r;
}

bool EvalReport::operator==(const EvalReport& o) const {
  if (report_to_json(*this) != report_to_json(o) || traces.size() != o.traces.size()) return false;
  for (std::size_t i = 0; i < traces.size(); ++i)
    if (trace_to_jsonl(traces[i]) != trace_to_jsonl(o.traces[i])) return false;
  return true;
}

// --- Aggregation ---

SeedSummary aggregate_seeds(const std::vector<SeedOutcome>& seeds) {
  SeedSummary s;
  std::vector<double> acc, views;
  for (const auto& o : seeds) {
    if (o.excluded || !o.report) {
      s.exclusions.emplace_back(o.seed, o.excluded ? o.reason : "no report");
      continue;
    }
    acc.push_back(o.report->accuracy);
    views.push_back(o.report->mean_viewpoints);
  }
  s.included = static_cast<int>(acc.size());
  if (acc.empty()) {
    s.failed = true;
    return s;
  }
  // Sample standard deviation; zero for a single seed.
  auto stats = [](const std::vector<double>& v, double& mean, double& sd) {
    mean = 0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0;
    for (double x : v) ss += (x - mean) * (x - mean);
    sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  };
  stats(acc, s.mean_accuracy, s.std_accuracy);
  stats(views, s.mean_viewpoints, s.std_viewpoints);
  return s;
}

json summary_to_json(const SeedSummary& s) {
  json excl = json::array();
  for (const auto& [seed, reason] : s.exclusions) excl.push_back({{"seed", seed}, {"reason", reason}});
  json j = {{"included", s.included}, {"exclusions", excl}};
  if (s.failed) {
    j["result"] = "configuration failed";
  } else {
    j["result"] = "ok";
    j["accuracy"] = {{"mean", s.mean_accuracy}, {"std", s.std_accuracy}};
    j["viewpoints"] = {{"mean", s.mean_viewpoints}, {"std", s.std_viewpoints}};
  }
  return j;
}

// --- Heatmaps ---

std::vector<double> heatmap_frequencies(const EvalReport& r, const ViewpointGrid& grid) {
  std::vector<double> f(grid.n_locations, 0.0);
  long long total = 0;
  for (const auto& [loc, n] : r.histogram) {
    if (loc < 0 || loc >= grid.n_locations)
      throw std::invalid_argument("heatmap: location " + std::to_string(loc) + " not in grid");
    f[loc] = static_cast<double>(n);
    total += n;
  }
  if (total > 0)
    for (double& x : f) x /= static_cast<double>(total);
  return f;
}

std::string heatmap_csv(const EvalReport& r, const ViewpointGrid& grid) {
  const auto f = heatmap_frequencies(r, grid);
  std::ostringstream os;
  os << "location,ring,tier,angle_deg,x,z,count,frequency\n";
  for (int i = 0; i < grid.n_locations; ++i) {
    const auto& l = grid.locations[i];
    const auto it = r.histogram.find(i);
    os << i << ',' << l.ring << ',' << l.tier << ',' << l.angle_deg << ',' << l.position.x << ','
       << l.position.z << ',' << (it == r.histogram.end() ? 0 : it->second) << ',' << f[i] << '\n';
  }
  return os.str();
}

Image heatmap_image(const EvalReport& r, const ViewpointGrid& grid, const RoomConfig& cfg,
                    int size) {
  if (size < 16) throw std::invalid_argument("heatmap: image too small");
  const auto f = heatmap_frequencies(r, grid);
  const double fmax = f.empty() ? 0.0 : *std::max_element(f.begin(), f.end());
  Image img;
  img.width = size;
  img.height = size;
  img.rgba.assign(static_cast<std::size_t>(size) * size * 4, 0);
  const double scale = (size - 8) / std::max(cfg.width, cfg.depth);
  auto put = [&](int row, int col, std::uint8_t rr, std::uint8_t gg, std::uint8_t bb) {
    if (row < 0 || col < 0 || row >= size || col >= size) return;
    auto* p = &img.rgba[(static_cast<std::size_t>(row) * size + col) * 4];
    p[0] = rr;
    p[1] = gg;
    p[2] = bb;
    p[3] = 255;
  };
  // Room floor, then a frame.
  for (int row = 0; row < size; ++row)
    for (int col = 0; col < size; ++col) put(row, col, 30, 30, 30);
  const int w = static_cast<int>(cfg.width * scale), d = static_cast<int>(cfg.depth * scale);
  const int ox = (size - w) / 2, oz = (size - d) / 2;
  for (int row = oz; row < oz + d; ++row)
    for (int col = ox; col < ox + w; ++col) put(row, col, 70, 70, 70);
  // Top-down: x to the right, z downward.
  auto to_pixel = [&](const Vec3& p) {
    return std::pair<int, int>{oz + static_cast<int>(p.z * scale), ox + static_cast<int>(p.x * scale)};
  };
  const int half = std::max(2, static_cast<int>(0.1 * scale));
  for (const Vec3& a : {cfg.anchor_a(), cfg.anchor_b()}) {
    const auto [pr, pc] = to_pixel(a);
    for (int dr = -half; dr <= half; ++dr)
      for (int dc = -half; dc <= half; ++dc) put(pr + dr, pc + dc, 230, 230, 230);
  }
  const int radius = std::max(2, size / 48);
  for (int i = 0; i < grid.n_locations; ++i) {
    const auto& l = grid.locations[i];
    auto [pr, pc] = to_pixel(l.position);
    pc += l.tier * radius;  // separate stacked height tiers
    const double v = fmax > 0 ? f[i] / fmax : 0.0;
    const auto red = static_cast<std::uint8_t>(40 + 215 * v);
    const auto green = static_cast<std::uint8_t>(40 + 120 * v);
    const auto blue = static_cast<std::uint8_t>(120 - 100 * v);
    for (int dr = -radius; dr <= radius; ++dr)
      for (int dc = -radius; dc <= radius; ++dc)
        if (dr * dr + dc * dc <= radius * radius) put(pr + dr, pc + dc, red, green, blue);
  }
  return img;
}

// --- Training ---

json checkpoint_metadata(const RunConfig& cfg, const Environment& env, std::uint64_t seed) {
  return {{"kind", "policy"},
          {"env", env.name()},
          {"image_width", env.config().image_width},
          {"image_height", env.config().image_height},
          {"max_steps_per_episode", env.config().max_steps_per_episode},
          {"channels", cfg.channels},
          {"history", env.history_size()},
          {"actions", env.policy_action_count()},
          {"method", to_string(cfg.method)},
          {"plan", cfg.plan},
          {"seed", seed},
          {"object_seed", cfg.object_seed}};
}

LoadedPolicy load_policy(const nn::Checkpoint& ck) {
  json meta;
  try {
    meta = json::parse(ck.metadata);
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("checkpoint metadata is not JSON: ") + e.what());
  }
  if (meta.value("kind", "") != "policy") throw std::runtime_error("checkpoint is not a policy");
  RoomConfig room;
  room.image_width = meta.at("image_width");
  room.image_height = meta.at("image_height");
  room.max_steps_per_episode = meta.at("max_steps_per_episode");
  Environment env = Environment::from_name(meta.at("env").get<std::string>(), room);
  nn::NetShape shape{room.image_height, room.image_width, meta.at("channels").get<int>(),
                     env.history_size(), env.policy_action_count()};
  if (shape.history != meta.at("history").get<int>() ||
      shape.actions != meta.at("actions").get<int>())
    throw std::runtime_error("checkpoint does not match its environment");
  Rng rng(0);
  nn::PolicyValueNet net(shape, rng);
  nn::load_parameters(ck, "policy.", net.parameters());
  return {std::move(env), std::move(net), shape.channels};
}

namespace {

const ObjectSet& object_set_for(std::uint64_t seed, ObjectSet& storage) {
  if (seed == kDefaultObjectSeed) return default_object_set();
  storage = generate_object_set(seed);
  return storage;
}

Lesson full_task_lesson() {
  return {kLessonCount,
          {kAllDifficulties.begin(), kAllDifficulties.end()},
          {kTestedOrientations.begin(), kTestedOrientations.end()}};
}

DemoDataset load_demos(const RunConfig& cfg, const ObjectSet& set, const Environment& env,
                       std::uint64_t seed) {
  std::vector<DiscreteDemo> discrete;
  if (cfg.demos_path.empty()) {
    Rng rng(Rng::derive_seed(seed, "demos"));
    for (const auto& d : synthesize_demos(set, env, cfg.n_demos, rng))
      discrete.push_back(discretize_demo(d, env));
  } else {
    for (auto& rec : read_demo_file(cfg.demos_path, set)) {
      if (rec.discrete) {
        if (rec.discrete->env != env.name())
          throw std::invalid_argument("demo recorded on " + rec.discrete->env + ", training on " +
                                      env.name());
        discrete.push_back(std::move(*rec.discrete));
      } else {
        discrete.push_back(discretize_demo(*rec.continuous, env));
      }
    }
  }
  return build_demo_dataset(discrete, env, cfg.channels);
}

}  // namespace

SeedRun run_seed(const RunConfig& cfg, std::uint64_t seed,
                 const std::function<void(const std::string&)>& log) {
  cfg.validate();
  ObjectSet storage;
  const ObjectSet& set = object_set_for(cfg.object_seed, storage);
  const Environment env = Environment::from_name(cfg.env, cfg.room());

  const bool curriculum = cfg.method == Method::Curriculum;
  const LessonPlan plan = curriculum ? plan_by_name(cfg.plan) : LessonPlan{};
  auto cstate = std::make_shared<CurriculumState>();
  TrialSource trials;
  if (curriculum) {
    trials = [&set, &plan, cstate](Rng& r) {
      return trial_sampler(set, plan.lesson(cstate->lesson_index), r);
    };
  } else {
    trials = [&set, full = full_task_lesson()](Rng& r) { return trial_sampler(set, full, r); };
  }
  const TaskFactory factory = [&env, &trials](int) {
    return std::make_unique<SameDiffTask>(env, trials);
  };

  const nn::NetShape shape{env.config().image_height, env.config().image_width, cfg.channels,
                           env.history_size(), env.policy_action_count()};
  Rng init = Rng(seed).substream("init");
  nn::PolicyValueNet net(shape, init);
  nn::Adam adam(net.parameters(), {cfg.ppo.lr});

  TrainOptions opt;
  opt.ppo = cfg.ppo;
  opt.stop.episode_budget = cfg.episode_budget;
  opt.stop.plateau_window = cfg.plateau_window;
  opt.stop.log_every = cfg.log_every;
  opt.stop.forgetting = cfg.forgetting;
  opt.n_envs = cfg.n_envs;
  opt.channels = cfg.channels;
  opt.seed = seed;

  // Imitation state must outlive training.
  DemoDataset demos;
  Rng imitation_rng = Rng(seed).substream("imitation");
  std::unique_ptr<nn::Discriminator> disc;
  std::unique_ptr<nn::Adam> disc_adam;

  TrainHooks hooks;
  if (cfg.method == Method::BC) {
    demos = load_demos(cfg, set, env, seed);
    hooks = bc_hooks(net, demos, cfg.bc, imitation_rng);
  } else if (cfg.method == Method::GAIL) {
    demos = load_demos(cfg, set, env, seed);
    Rng disc_init = Rng(seed).substream("discriminator");
    disc = std::make_unique<nn::Discriminator>(shape, disc_init);
    disc_adam = std::make_unique<nn::Adam>(disc->parameters(), nn::AdamConfig{cfg.gail.lr});
    hooks = gail_hooks(*disc, *disc_adam, demos, cfg.gail, imitation_rng);
  } else if (curriculum) {
    hooks.on_episode = [cstate, cc = cfg.curriculum](double reward, bool) {
      record_episode(*cstate, reward, cc);
    };
    hooks.lesson_index = [cstate] { return cstate->lesson_index; };
    hooks.should_stop = [cstate]() -> std::optional<StopReason> {
      if (cstate->finished) return StopReason::CurriculumFinished;
      if (cstate->stalled) return StopReason::CurriculumStalled;
      return std::nullopt;
    };
  }

  // Curriculum runs retain the furthest lesson's best parameters.
  nn::Checkpoint lesson_best;
  int lesson_best_index = 0;
  double lesson_best_reward = -1e300;
  hooks.on_log = [&](const CurvePoint& p) {
    if (curriculum && (p.lesson_index > lesson_best_index ||
                       (p.lesson_index == lesson_best_index && p.mean_reward > lesson_best_reward))) {
      lesson_best = nn::Checkpoint{};
      nn::store_parameters(lesson_best, "policy.", net.parameters());
      lesson_best_index = p.lesson_index;
      lesson_best_reward = p.mean_reward;
    }
    if (log) {
      char buf[200];
      std::snprintf(buf, sizeof buf, "seed %llu episode %lld reward %.3f entropy %.3f clip %.3f lesson %d",
                    static_cast<unsigned long long>(seed), p.episode, p.mean_reward, p.entropy,
                    p.clip_fraction, p.lesson_index);
      log(buf);
    }
  };

  SeedRun run;
  run.seed = seed;
  run.train = train_loop(factory, net, adam, opt, hooks);
  run.final_lesson = curriculum ? cstate->lesson_index : 0;

  // Which parameters to evaluate: PPO-family runs keep the best curve point;
  // curriculum runs keep their final parameters unless forgetting fired.
  nn::Checkpoint ck;
  if (curriculum) {
    if (run.train.reason == StopReason::Forgetting && !lesson_best.tensors.empty()) {
      ck = lesson_best;
    } else {
      nn::store_parameters(ck, "policy.", net.parameters());
    }
  } else {
    ck = run.train.best;
  }
  json meta = checkpoint_metadata(cfg, env, seed);
  meta["episodes"] = run.train.episodes;
  meta["stop_reason"] = to_string(run.train.reason);
  meta["final_lesson"] = run.final_lesson;
  ck.metadata = meta.dump();
  run.eval_checkpoint = ck;

  if (run.train.failed) {
    run.excluded = true;
    run.reason = run.train.failure.empty() ? std::string(to_string(run.train.reason))
                                           : run.train.failure;
    return run;
  }
  const LoadedPolicy loaded = load_policy(ck);
  EvalOptions eo;
  eo.n_trials = cfg.eval_trials;
  eo.seed = Rng::derive_seed(seed, "eval");
  run.report = evaluate(loaded.env, set, network_policy(loaded.net, loaded.channels), eo);
  return run;
}

namespace {

void write_file(const std::filesystem::path& path, const std::string& text) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out << text;
    if (!out) throw std::runtime_error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace

SeedSummary train_all(const RunConfig& cfg, const std::function<void(const std::string&)>& log) {
  cfg.validate();
  const std::filesystem::path dir(cfg.output_dir);
  std::filesystem::create_directories(dir);
  write_file(dir / "config.json", cfg.to_json().dump(2) + "\n");

  std::mutex mu;
  auto safe_log = [&](const std::string& line) {
    if (!log) return;
    std::lock_guard lock(mu);
    log(line);
  };
  std::vector<SeedRun> runs(cfg.seeds.size());
  std::vector<std::string> errors(cfg.seeds.size());
  std::size_t next = 0;
  auto worker = [&] {
    while (true) {
      std::size_t i;
      {
        std::lock_guard lock(mu);
        if (next >= cfg.seeds.size()) return;
        i = next++;
      }
      try {
        runs[i] = run_seed(cfg, cfg.seeds[i], safe_log);
      } catch (const std::exception& e) {
        // Environment or configuration failures abort the seed, not the
        // whole batch; they are reported as exclusions.
        runs[i].seed = cfg.seeds[i];
        runs[i].excluded = true;
        runs[i].reason = std::string("error: ") + e.what();
      }
      safe_log("seed " + std::to_string(cfg.seeds[i]) + " done");
    }
  };
  const int jobs = std::min<int>(cfg.jobs, static_cast<int>(cfg.seeds.size()));
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  json manifest = json::array();
  std::string excluded_log;
  std::vector<SeedOutcome> outcomes;
  for (const auto& r : runs) {
    const std::string s = std::to_string(r.seed);
    write_file(dir / ("curve_" + s + ".csv"), curve_to_csv(r.train.curve));
    if (!r.eval_checkpoint.tensors.empty())
      nn::save_checkpoint((dir / ("checkpoint_" + s + ".bin")).string(), r.eval_checkpoint);
    json entry = {{"seed", r.seed},
                  {"status", r.excluded ? "excluded" : "included"},
                  {"stop_reason", to_string(r.train.reason)},
                  {"episodes", r.train.episodes},
                  {"steps", r.train.steps},
                  {"best_mean_reward", r.train.curve.empty() ? 0.0 : r.train.best_mean_reward}};
    if (cfg.method == Method::Curriculum) entry["final_lesson"] = r.final_lesson;
    SeedOutcome o;
    o.seed = r.seed;
    o.excluded = r.excluded;
    o.reason = r.reason;
    if (r.excluded) {
      entry["reason"] = r.reason;
      excluded_log += "seed " + s + ": " + r.reason + "\n";
    } else {
      write_file(dir / ("report_" + s + ".json"), report_to_json(r.report).dump(2) + "\n");
      entry["accuracy"] = r.report.accuracy;
      entry["mean_viewpoints"] = r.report.mean_viewpoints;
      o.report = r.report;
    }
    manifest.push_back(entry);
    outcomes.push_back(std::move(o));
  }
  write_file(dir / "seeds.json", manifest.dump(2) + "\n");
  write_file(dir / "excluded_seeds.log", excluded_log);
  const SeedSummary summary = aggregate_seeds(outcomes);
  write_file(dir / "summary.json", summary_to_json(summary).dump(2) + "\n");
  return summary;
}

}  // namespace samediff
