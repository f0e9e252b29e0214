#include <gtest/gtest.h>

#include <cmath>

#include "samediff/env.hpp"
#include "samediff/png_io.hpp"
#include "samediff/render.hpp"

using namespace samediff;

namespace {

// Nearest hit over every occupied cube as an independent slab test.
std::optional<double> brute_force_hit(const VoxelObject& o, const Ray& ray) {
  std::optional<double> best;
  for (int x = 0; x < o.dims[0]; ++x)
    for (int y = 0; y < o.dims[1]; ++y)
      for (int z = 0; z < o.dims[2]; ++z) {
        if (!o.occupied_at({x, y, z})) continue;
        double t0 = -1e300, t1 = 1e300;
        const int c[3] = {x, y, z};
        bool miss = false;
        for (int i = 0; i < 3; ++i) {
          const double lo = o.origin[i] + c[i] * o.cube, hi = lo + o.cube;
          if (std::abs(ray.dir[i]) < 1e-15) {
            if (ray.origin[i] < lo || ray.origin[i] > hi) miss = true;
            continue;
          }
          double a = (lo - ray.origin[i]) / ray.dir[i], b = (hi - ray.origin[i]) / ray.dir[i];
          if (a > b) std::swap(a, b);
          t0 = std::max(t0, a);
          t1 = std::min(t1, b);
        }
        if (miss || t0 > t1 || t1 < 0) continue;
        const double t = std::max(t0, 0.0);
        if (!best || t < *best) best = t;
      }
  return best;
}

struct Fixture {
  Environment env = Environment::from_name("d6");
  Trial trial;
  Scene scene;
  Fixture() {
    Rng rng(9);
    trial = make_trial(default_object_set(), Difficulty::Hard, 90, Label::Different, rng);
    scene = env.make_scene(trial);
  }
};

int count_ids(const RenderOutput& r, HitId id) {
  int n = 0;
  for (auto h : r.ids) n += h == id;
  return n;
}

}  // namespace

TEST(Render, FacingAwayShowsNoObjectPixels) {
  Fixture f;
  Camera cam;
  cam.position = {1.5, 1.5, 2.0};
  cam.yaw = 180;  // toward the z = 0 wall, objects are beside and behind
  cam.fov = 40;
  const auto out = render_with_ids(f.scene, cam);
  EXPECT_EQ(count_ids(out, HitId::ObjectA) + count_ids(out, HitId::ObjectB), 0);
  for (int r = 0; r < cam.height; ++r)
    for (int c = 0; c < cam.width; ++c) EXPECT_LT(out.image.at(r, c, 0), kObjectMinGray);
}

TEST(Render, EveryGridViewShowsItsTarget) {
  // From side locations the other object can occlude most of the target,
  // so only require that some of it is visible.
  Fixture f;
  for (int loc = 0; loc < 6; ++loc)
    for (Target t : {Target::ObjectA, Target::ObjectB}) {
      const auto st = f.env.step(f.env.reset(f.trial), ViewAction{loc, t}).state;
      const Camera cam = f.env.camera_for(st.pose);
      int hits = 0;
      for (int r = 0; r < cam.height; ++r)
        for (int c = 0; c < cam.width; ++c) {
          const Ray ray = pixel_ray(cam, r, c);
          const auto ha = brute_force_hit(f.scene.object_a, ray);
          const auto hb = brute_force_hit(f.scene.object_b, ray);
          const bool a_first = ha && (!hb || *ha <= *hb);
          hits += t == Target::ObjectA ? a_first : (hb && !a_first);
        }
      EXPECT_GT(hits, 0) << "location " << loc;
    }
}

TEST(Render, IdsMatchBruteForceRaycast) {
  Fixture f;
  for (int loc = 0; loc < 6; ++loc)
    for (Target t : {Target::ObjectA, Target::ObjectB}) {
      const auto st = f.env.step(f.env.reset(f.trial), ViewAction{loc, t}).state;
      const Camera cam = f.env.camera_for(st.pose);
      const auto out = render_with_ids(f.scene, cam);
      int mismatches = 0;
      for (int r = 0; r < cam.height; ++r)
        for (int c = 0; c < cam.width; ++c) {
          const Ray ray = pixel_ray(cam, r, c);
          const auto ha = brute_force_hit(f.scene.object_a, ray);
          const auto hb = brute_force_hit(f.scene.object_b, ray);
          HitId want = HitId::Room;
          if (ha && (!hb || *ha <= *hb)) want = HitId::ObjectA;
          else if (hb) want = HitId::ObjectB;
          mismatches += out.ids[r * cam.width + c] != want;
        }
      EXPECT_EQ(mismatches, 0) << "location " << loc;
    }
}

TEST(Render, DeterministicOpaqueAndShadedByClass) {
  Fixture f;
  const auto st = f.env.reset(f.trial);
  const Camera cam = f.env.camera_for(st.pose);
  const auto a = render_with_ids(f.scene, cam);
  const auto b = render_with_ids(f.scene, cam);
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(image_hash(a.image), image_hash(b.image));
  for (int r = 0; r < cam.height; ++r)
    for (int c = 0; c < cam.width; ++c) {
      EXPECT_EQ(a.image.at(r, c, 3), 255);
      const auto g = a.image.at(r, c, 0);
      EXPECT_EQ(g, a.image.at(r, c, 1));
      EXPECT_EQ(g, a.image.at(r, c, 2));
      if (a.ids[r * cam.width + c] == HitId::Room)
        EXPECT_TRUE(g == kFloorGray || g == kWallGray || g == kCeilingGray) << int(g);
      else
        EXPECT_GE(g, kObjectMinGray);
    }
}

TEST(Render, RejectsInvalidCameras) {
  Fixture f;
  Camera cam;
  cam.position = {1.5, 1.5, 0.5};
  cam.width = 0;
  EXPECT_THROW(render(f.scene, cam), std::invalid_argument);
  cam.width = 8;
  cam.fov = 5;
  EXPECT_THROW(render(f.scene, cam), std::invalid_argument);
  cam.fov = 60;
  cam.pitch = 95;
  EXPECT_THROW(render(f.scene, cam), std::invalid_argument);
}

TEST(LookAt, Examples) {
  auto [p, y] = look_at({0, 1.5, 0}, {0, 1.5, 1});
  EXPECT_NEAR(p, 0.0, 1e-12);
  EXPECT_NEAR(y, 0.0, 1e-12);
  std::tie(p, y) = look_at({0, 1.5, 0}, {0, 3.0, 0});
  EXPECT_DOUBLE_EQ(p, 89.0);
  EXPECT_THROW(look_at({1, 1, 1}, {1, 1, 1}), std::invalid_argument);
}

TEST(LookAt, RoundTripAndCenterPixel) {
  Rng rng(21);
  for (int i = 0; i < 200; ++i) {
    const Vec3 pos(rng.uniform(0.2, 2.8), rng.uniform(0.3, 2.7), rng.uniform(0.2, 3.8));
    const Vec3 tgt(rng.uniform(0.2, 2.8), rng.uniform(0.3, 2.7), rng.uniform(0.2, 3.8));
    const Vec3 d = tgt - pos;
    if (norm(d) < 0.8 || std::abs(d.y) / norm(d) > 0.99) continue;
    const auto [pitch, yaw] = look_at(pos, tgt);
    Camera cam;
    cam.position = pos;
    cam.pitch = pitch;
    cam.yaw = yaw;
    cam.width = cam.height = 65;
    EXPECT_LT(norm(cam.forward() - normalized(d)), 1e-6);
    // A single cube centered on the target covers the center pixel.
    Scene s;
    s.object_a = place_object({{0, 0, 0}}, tgt);
    s.object_b = place_object({{0, 0, 0}}, {-50, -50, -50});
    const auto out = render_with_ids(s, cam);
    EXPECT_EQ(out.ids[32 * 65 + 32], HitId::ObjectA);
  }
}

TEST(Traversal, VisitsInOrderAndFindsNearestCube) {
  Fixture f;
  Rng rng(4);
  const VoxelObject& o = f.scene.object_b;
  for (int i = 0; i < 2000; ++i) {
    const Vec3 target = o.center() + Vec3(rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2),
                                          rng.uniform(-0.2, 0.2));
    const Vec3 origin = o.center() + Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    if (norm(target - origin) < 1e-3) continue;
    const Ray ray{origin, normalized(target - origin)};
    double last = -1e300;
    bool ordered = true;
    traverse_voxels(o, ray, [&](const Cell&, double t) {
      ordered = ordered && t >= last;
      last = t;
      return true;
    });
    EXPECT_TRUE(ordered);
    const auto hit = intersect_voxels(o, ray);
    const auto ref = brute_force_hit(o, ray);
    ASSERT_EQ(hit.has_value(), ref.has_value());
    if (hit) EXPECT_NEAR(hit->t, *ref, 1e-9);
  }
}

TEST(Render, CenterRayVisibilityIndependentOfResolution) {
  Fixture f;
  Rng rng(8);
  for (int i = 0; i < 100; ++i) {
    Camera cam;
    cam.position = {rng.uniform(0.3, 2.7), rng.uniform(1.0, 2.0), rng.uniform(0.3, 1.2)};
    const Vec3 aim = (rng.bernoulli(0.5) ? f.scene.object_a.center() : f.scene.object_b.center()) +
                     Vec3(rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15), 0);
    std::tie(cam.pitch, cam.yaw) = look_at(cam.position, aim);
    std::optional<HitId> first;
    for (int side : {17, 33, 65, 129}) {
      cam.width = cam.height = side;
      const auto out = render_with_ids(f.scene, cam);
      const HitId id = out.ids[(side / 2) * side + side / 2];
      if (!first) first = id;
      EXPECT_EQ(id, *first) << "side " << side;
    }
  }
}

TEST(Png, RoundTrip) {
  Fixture f;
  const Image img = render(f.scene, f.env.camera_for(f.env.reset(f.trial).pose));
  EXPECT_EQ(decode_png(encode_png(img)), img);
  EXPECT_THROW(decode_png({1, 2, 3}), std::runtime_error);
}
