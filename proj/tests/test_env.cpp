#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "samediff/env.hpp"

using namespace samediff;

namespace {

Trial some_trial(Label label, std::uint64_t seed = 1) {
  Rng rng(seed);
  return make_trial(default_object_set(), Difficulty::Medium, 90, label, rng);
}

bool near(double a, double b) { return std::abs(a - b) < 1e-12; }

// Independent ray-vs-sphere gaze test on the object's bounding sphere.
bool gaze_hits(const Environment& env, const EnvState& s, const Pose& p) {
  const Vec3 f = env.camera_for(p).forward();
  for (const VoxelObject* o : {&s.scene->object_a, &s.scene->object_b}) {
    const double r = o->circumradius() * 1.1;
    const Vec3 oc = o->center() - p.position;
    const double along = dot(oc, f);
    const double d2 = dot(oc, oc) - along * along;
    if (d2 <= r * r && (along >= 0 || dot(oc, oc) <= r * r)) return true;
  }
  return false;
}

}  // namespace

TEST(Grid, ActionCountsAtTheExtremes) {
  const RoomConfig cfg;
  EXPECT_EQ(build_grid(6, cfg).view_action_count(), 12);
  EXPECT_EQ(build_grid(96, cfg).view_action_count(), 192);
  EXPECT_THROW(build_grid(7, cfg), std::invalid_argument);
  EXPECT_THROW(build_grid(0, cfg), std::invalid_argument);
}

TEST(Grid, InsideRoomDistinctAndClearOfObjects) {
  const RoomConfig cfg;
  for (int n : kGridSizes) {
    const auto g = build_grid(n, cfg);
    ASSERT_EQ(g.n_locations, n);
    ASSERT_EQ(static_cast<int>(g.locations.size()), n);
    std::set<std::tuple<double, double, double>> seen;
    for (const auto& l : g.locations) {
      const Vec3& p = l.position;
      EXPECT_GT(p.x, 0);
      EXPECT_LT(p.x, cfg.width);
      EXPECT_GT(p.y, 0);
      EXPECT_LT(p.y, cfg.height);
      EXPECT_GT(p.z, 0);
      EXPECT_LT(p.z, cfg.depth);
      EXPECT_GE(distance(p, cfg.anchor_a()), 0.3) << "n=" << n;
      EXPECT_GE(distance(p, cfg.anchor_b()), 0.3) << "n=" << n;
      seen.insert({p.x, p.y, p.z});
    }
    EXPECT_EQ(static_cast<int>(seen.size()), n);
  }
}

TEST(Grid, RingAndTierStructure) {
  const RoomConfig cfg;
  for (int n : {6, 12, 24}) {
    for (const auto& l : build_grid(n, cfg).locations) {
      EXPECT_EQ(l.ring, 0);
      EXPECT_EQ(l.tier, 0);
      EXPECT_DOUBLE_EQ(l.position.y, 1.5);
    }
  }
  auto count = [](const ViewpointGrid& g, int ring, int tier) {
    int c = 0;
    for (const auto& l : g.locations) c += l.ring == ring && l.tier == tier;
    return c;
  };
  const auto g48 = build_grid(48, cfg), g72 = build_grid(72, cfg), g96 = build_grid(96, cfg);
  EXPECT_EQ(count(g48, 0, 0), 24);
  EXPECT_EQ(count(g48, 1, 0), 24);
  EXPECT_EQ(count(g72, 0, 0), 36);
  EXPECT_EQ(count(g72, 1, 0), 36);
  for (int ring : {0, 1})
    for (int tier : {0, 1}) EXPECT_EQ(count(g96, ring, tier), 24);
  std::set<double> heights;
  for (const auto& l : g96.locations) heights.insert(l.position.y);
  EXPECT_EQ(heights, (std::set<double>{1.2, 1.8}));
  // Equal angular spacing on a ring.
  const auto g12 = build_grid(12, cfg);
  for (int i = 1; i < 12; ++i)
    EXPECT_NEAR(g12.locations[i].angle_deg - g12.locations[i - 1].angle_deg, 30.0, 1e-9);
}

TEST(Reset, StartsCleanAndDeterministic) {
  const Trial t = some_trial(Label::Same);
  for (const std::string name : {"d6", "d48", "continuous"}) {
    const auto env = Environment::from_name(name);
    const auto a = env.reset(t), b = env.reset(t);
    EXPECT_EQ(a.step_count, 0);
    EXPECT_EQ(a.outcome, Outcome::None);
    EXPECT_FALSE(a.done);
    EXPECT_EQ(env.observe(a).frame, env.observe(b).frame);
    EXPECT_EQ(observation_hash(env.observe(a)), observation_hash(env.observe(b)));
  }
  const auto d6 = Environment::from_name("d6");
  const auto s = d6.reset(t);
  EXPECT_EQ(s.location, 0);
  EXPECT_EQ(s.target, Target::ObjectA);
  const auto cont = Environment::from_name("continuous");
  EXPECT_EQ(cont.reset(t).pose, cont.start_pose());
}

TEST(Reset, FirstDiscreteObservationShowsObjectA) {
  const auto env = Environment::from_name("d6");
  for (Label l : {Label::Same, Label::Different}) {
    const auto s = env.reset(some_trial(l, 7));
    const auto ids = render_with_ids(*s.scene, env.camera_for(s.pose)).ids;
    const auto frame = env.observe(s).frame;
    int object_pixels = 0, a = 0;
    for (int i = 0; i < frame.width * frame.height; ++i) {
      object_pixels += frame.rgba[i * 4] >= kObjectMinGray;
      a += ids[i] == HitId::ObjectA;
    }
    EXPECT_GT(object_pixels, 0);
    EXPECT_GT(a, 0);
  }
}

TEST(Step, AnswerRewards) {
  const auto env = Environment::from_name("d12");
  const auto same = env.reset(some_trial(Label::Same));
  auto r = env.step(same, AnswerAction{Label::Same});
  EXPECT_EQ(r.reward, 1.0);
  EXPECT_TRUE(r.done);
  EXPECT_EQ(r.state.outcome, Outcome::Correct);
  r = env.step(same, AnswerAction{Label::Different});
  EXPECT_EQ(r.reward, -1.0);
  EXPECT_TRUE(r.done);
  EXPECT_EQ(r.state.outcome, Outcome::Incorrect);
  const auto diff = env.reset(some_trial(Label::Different));
  EXPECT_EQ(env.step(diff, AnswerAction{Label::Different}).reward, 1.0);
  EXPECT_EQ(env.step(diff, AnswerAction{Label::Same}).reward, -1.0);
  EXPECT_THROW(env.step(r.state, AnswerAction{Label::Same}), std::logic_error);
}

TEST(Step, ViewTeleportsAndAimsAtTarget) {
  const auto env = Environment::from_name("d24");
  auto s = env.reset(some_trial(Label::Same));
  for (int loc : {0, 5, 23})
    for (Target t : {Target::ObjectA, Target::ObjectB}) {
      const auto r = env.step(s, ViewAction{loc, t});
      EXPECT_EQ(r.reward, 0.0);
      EXPECT_FALSE(r.done);
      EXPECT_EQ(r.state.location, loc);
      EXPECT_EQ(r.state.pose.position, env.grid().locations[loc].position);
      const Vec3 aim = t == Target::ObjectA ? s.scene->object_a.center() : s.scene->object_b.center();
      EXPECT_LT(norm(env.camera_for(r.state.pose).forward() - normalized(aim - r.state.pose.position)), 1e-9);
    }
  EXPECT_THROW(env.step(s, ViewAction{24, Target::ObjectA}), std::invalid_argument);
  EXPECT_THROW(env.step(s, ViewAction{-1, Target::ObjectA}), std::invalid_argument);
  EXPECT_THROW(env.step(s, MoveAction{}), std::invalid_argument);
}

TEST(Step, ContinuousPenaltiesStack) {
  const auto env = Environment::from_name("continuous");
  const auto s0 = env.reset(some_trial(Label::Same));

  // Looking at the floor from inside the room.
  EnvState s = s0;
  s.pose.pitch = -60;
  auto r = env.step(s, MoveAction{0, 0, 0, -5, 0, std::nullopt});
  EXPECT_TRUE(near(r.reward, -0.01));
  EXPECT_FALSE(gaze_hits(env, s, r.state.pose));

  // Aimed at object A: no penalty.
  s = s0;
  std::tie(s.pose.pitch, s.pose.yaw) = look_at(s.pose.position, s0.scene->object_a.center());
  r = env.step(s, MoveAction{});
  EXPECT_EQ(r.reward, 0.0);

  // Stepping through the z = 0 wall while aimed at A: one penalty.
  s.pose.position.z = 0.01;
  std::tie(s.pose.pitch, s.pose.yaw) = look_at(s.pose.position, s0.scene->object_a.center());
  r = env.step(s, MoveAction{0, 0, -0.05, 0, 0, std::nullopt});
  EXPECT_TRUE(near(r.reward, -0.01));
  EXPECT_EQ(r.state.pose.position.z, 0.0);

  // Through the wall and looking away: both penalties.
  s.pose.pitch = 0;
  s.pose.yaw = 180;
  r = env.step(s, MoveAction{0, 0, -0.05, 0, 0, std::nullopt});
  EXPECT_TRUE(near(r.reward, -0.02));
}

TEST(Step, ContinuousDeltasAreClamped) {
  const auto env = Environment::from_name("continuous");
  const auto s = env.reset(some_trial(Label::Same));
  const auto r = env.step(s, MoveAction{1.0, -1.0, 0.5, 40, -40, std::nullopt});
  const Vec3 d = r.state.pose.position - s.pose.position;
  EXPECT_NEAR(d.x, 0.05, 1e-12);
  EXPECT_NEAR(d.y, -0.05, 1e-12);
  EXPECT_NEAR(d.z, 0.05, 1e-12);
  EXPECT_NEAR(r.state.pose.pitch - s.pose.pitch, 5.0, 1e-12);
  EXPECT_NEAR(r.state.pose.yaw, -5.0, 1e-12);
}

TEST(Step, GazePenaltyAgreesWithSphereOracle) {
  const auto env = Environment::from_name("continuous");
  const auto s0 = env.reset(some_trial(Label::Different, 3));
  Rng rng(12);
  for (int i = 0; i < 3000; ++i) {
    EnvState s = s0;
    s.pose.position = {rng.uniform(0.1, 2.9), rng.uniform(0.5, 2.5), rng.uniform(0.1, 3.9)};
    s.pose.pitch = rng.uniform(-60, 60);
    s.pose.yaw = rng.uniform(-180, 180);
    const auto r = env.step(s, MoveAction{});
    EXPECT_TRUE(near(r.reward, gaze_hits(env, s, r.state.pose) ? 0.0 : -0.01));
  }
}

TEST(Step, TimeoutAfterMaxStepsWithoutAnswer) {
  for (const std::string name : {"d6", "continuous"}) {
    const auto env = Environment::from_name(name);
    auto s = env.reset(some_trial(Label::Same));
    double ret = 0, penalties = 0;
    int steps = 0;
    while (!s.done) {
      const Action a = env.discrete() ? Action(ViewAction{steps % 6, Target::ObjectB})
                                      : Action(MoveAction{0, 0, 0, 0, 5, std::nullopt});
      const auto r = env.step(s, a);
      ret += r.reward;
      if (r.reward < 0) penalties += r.reward;
      s = r.state;
      ++steps;
    }
    EXPECT_EQ(steps, 256);
    EXPECT_EQ(s.outcome, Outcome::Timeout);
    EXPECT_DOUBLE_EQ(ret, penalties);
    if (env.discrete()) EXPECT_EQ(ret, 0.0);
  }
}

TEST(Step, RewardSetOverRandomEpisodes) {
  Rng rng(99);
  const std::set<double> discrete_allowed = {1.0, -1.0, 0.0};
  for (const std::string name : {"d6", "d12", "d24", "d48", "d72", "d96", "continuous"}) {
    RoomConfig cfg;
    cfg.image_width = cfg.image_height = 8;
    cfg.max_steps_per_episode = 40;
    const auto env = Environment::from_name(name, cfg);
    for (int ep = 0; ep < 30; ++ep) {
      const Label l = rng.bernoulli(0.5) ? Label::Same : Label::Different;
      auto s = env.reset(make_trial(default_object_set(), Difficulty::Easy, 0, l, rng));
      int steps = 0;
      while (!s.done) {
        const int a = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(env.policy_action_count())));
        // Mostly move, occasionally answer.
        const int action = rng.bernoulli(0.05) ? a : a % (env.policy_action_count() - 2);
        const auto r = env.step(s, env.decode_policy_action(action));
        if (env.discrete()) {
          EXPECT_TRUE(discrete_allowed.count(r.reward)) << r.reward;
        } else {
          EXPECT_TRUE(r.reward == 1.0 || r.reward == -1.0 || r.reward == 0.0 ||
                      near(r.reward, -0.01) || near(r.reward, -0.02))
              << r.reward;
        }
        s = r.state;
        ++steps;
      }
      EXPECT_LE(steps, cfg.max_steps_per_episode);
      EXPECT_EQ(s.done, s.outcome != Outcome::None);
    }
  }
}

TEST(Step, PureInStateAndAction) {
  const auto env = Environment::from_name("continuous");
  const auto s = env.reset(some_trial(Label::Same));
  const MoveAction m{0.02, 0.01, 0.03, 2, -3, std::nullopt};
  const auto a = env.step(s, m), b = env.step(s, m);
  EXPECT_EQ(a.reward, b.reward);
  EXPECT_EQ(a.state.pose, b.state.pose);
  EXPECT_EQ(observation_hash(env.observe(a.state)), observation_hash(env.observe(b.state)));
}

TEST(Observation, HistoryIsOneHotOfRecentActionsMostRecentFirst) {
  const auto env = Environment::from_name("d6");
  auto s = env.reset(some_trial(Label::Same));
  EXPECT_EQ(env.history_size(), 14 * 8);
  for (float v : env.observe(s).history) EXPECT_EQ(v, 0.0f);
  for (int i = 0; i < 10; ++i) s = env.step(s, ViewAction{i % 6, i % 2 ? Target::ObjectB : Target::ObjectA}).state;
  const auto h = env.observe(s).history;
  for (int slot = 0; slot < 8; ++slot) {
    const int i = 9 - slot;
    const int hot = 2 * (i % 6) + (i % 2);
    for (int k = 0; k < 14; ++k) EXPECT_EQ(h[slot * 14 + k], k == hot ? 1.0f : 0.0f);
  }
}

TEST(Actions, PolicyIndexRoundTrip) {
  const auto env = Environment::from_name("d12");
  for (int i = 0; i < env.policy_action_count(); ++i)
    EXPECT_EQ(env.encode_policy_action(env.decode_policy_action(i)), i);
  EXPECT_THROW(env.decode_policy_action(env.policy_action_count()), std::out_of_range);
  const auto cont = Environment::from_name("continuous");
  EXPECT_EQ(cont.policy_action_count(), kContinuousPolicyActions);
  EXPECT_EQ(std::get<AnswerAction>(cont.decode_policy_action(10)).answer, Label::Same);
}

TEST(Metrics, ViewpointCounts) {
  const auto env = Environment::from_name("d6");
  EpisodeTrace tr;
  tr.env_name = "d6";
  tr.trial = some_trial(Label::Same);
  auto s = env.reset(tr.trial);
  for (const Action& a : {Action(ViewAction{3, Target::ObjectA}), Action(ViewAction{3, Target::ObjectB}),
                          Action(ViewAction{5, Target::ObjectA}), Action(AnswerAction{Label::Same})}) {
    const auto r = env.step(s, a);
    s = r.state;
    tr.steps.push_back({a, r.reward, s.pose, r.done, 0});
  }
  tr.outcome = s.outcome;
  const auto m = episode_metrics(tr);
  EXPECT_TRUE(m.correct);
  EXPECT_EQ(m.n_viewpoints, 3);
  EXPECT_EQ(m.viewpoint_histogram, (std::map<int, int>{{3, 2}, {5, 1}}));
  EXPECT_DOUBLE_EQ(m.dominant_share(), 2.0 / 3.0);

  EpisodeTrace quick = tr;
  quick.steps = {{AnswerAction{Label::Same}, 1.0, s.pose, true, 0}};
  EXPECT_EQ(episode_metrics(quick).n_viewpoints, 0);

  EpisodeTrace open = tr;
  open.steps.pop_back();
  EXPECT_THROW(episode_metrics(open), std::logic_error);
}

TEST(Traces, JsonLinesRoundTripAndReplay) {
  Rng rng(5);
  for (const std::string name : {"d6", "d96", "continuous"}) {
    RoomConfig cfg;
    cfg.image_width = cfg.image_height = 24;
    const auto env = Environment::from_name(name, cfg);
    EpisodeTrace tr;
    tr.env_name = name;
    tr.image_width = tr.image_height = 24;
    tr.trial = make_trial(default_object_set(), Difficulty::Hard, 180, Label::Different, rng);
    auto s = env.reset(tr.trial);
    tr.initial_obs_hash = observation_hash(env.observe(s));
    for (int i = 0; i < 12 && !s.done; ++i) {
      const int a = i == 11 ? env.policy_action_count() - 1
                            : static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(env.policy_action_count() - 2)));
      const Action act = env.decode_policy_action(a);
      const auto r = env.step(s, act);
      s = r.state;
      tr.steps.push_back({act, r.reward, s.pose, r.done, observation_hash(env.observe(s))});
    }
    tr.outcome = s.outcome;
    const auto back = trace_from_jsonl(trace_to_jsonl(tr), default_object_set());
    EXPECT_EQ(trace_to_jsonl(back), trace_to_jsonl(tr));
    const auto rep = replay_trace(back);
    EXPECT_TRUE(rep.rewards_match) << name;
    EXPECT_TRUE(rep.hashes_match) << name;
    EXPECT_EQ(rep.observations.size(), tr.steps.size() + 1);

    EpisodeTrace tampered = back;
    tampered.steps[0].reward += 0.5;
    EXPECT_FALSE(replay_trace(tampered).rewards_match);
    tampered = back;
    tampered.steps.back().obs_hash ^= 1;
    EXPECT_FALSE(replay_trace(tampered).hashes_match);
  }
}

TEST(Traces, TimeoutUnderShortStepLimitReplays) {
  Rng rng(6);
  RoomConfig cfg;
  cfg.image_width = cfg.image_height = 16;
  cfg.max_steps_per_episode = 4;
  const auto env = Environment::from_name("d12", cfg);
  EpisodeTrace tr;
  tr.env_name = "d12";
  tr.image_width = tr.image_height = 16;
  tr.max_steps_per_episode = 4;
  tr.trial = make_trial(default_object_set(), Difficulty::Easy, 0, Label::Same, rng);
  auto s = env.reset(tr.trial);
  tr.initial_obs_hash = observation_hash(env.observe(s));
  while (!s.done) {
    const Action act = ViewAction{3, Target::ObjectB};
    const auto r = env.step(s, act);
    s = r.state;
    tr.steps.push_back({act, r.reward, s.pose, r.done, observation_hash(env.observe(s))});
  }
  ASSERT_EQ(s.outcome, Outcome::Timeout);
  const auto back = trace_from_jsonl(trace_to_jsonl(tr), default_object_set());
  EXPECT_EQ(back.max_steps_per_episode, 4);
  const auto rep = replay_trace(back);
  EXPECT_TRUE(rep.rewards_match);
  EXPECT_TRUE(rep.hashes_match);
}
