#include "samediff/render.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace samediff {

std::uint64_t image_hash(const Image& img) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](std::uint8_t b) {
    h ^= b;
    h *= 0x100000001b3ULL;
  };
  for (int shift = 0; shift < 32; shift += 8) mix(static_cast<std::uint8_t>(img.width >> shift));
  for (int shift = 0; shift < 32; shift += 8) mix(static_cast<std::uint8_t>(img.height >> shift));
  for (auto b : img.rgba) mix(b);
  return h;
}

Vec3 Camera::forward() const {
  const double p = deg_to_rad(pitch);
  const double y = deg_to_rad(yaw);
  return {std::sin(y) * std::cos(p), std::sin(p), std::cos(y) * std::cos(p)};
}

bool VoxelObject::occupied_at(const Cell& c) const {
  for (int i = 0; i < 3; ++i)
    if (c[i] < 0 || c[i] >= dims[i]) return false;
  return occupied[(static_cast<std::size_t>(c[0]) * dims[1] + c[1]) * dims[2] + c[2]] != 0;
}

Vec3 VoxelObject::max_corner() const {
  return origin + Vec3(dims[0] * cube, dims[1] * cube, dims[2] * cube);
}

Vec3 VoxelObject::center() const { return (origin + max_corner()) * 0.5; }

double VoxelObject::circumradius() const {
  const Vec3 c = center();
  double r = 0.0;
  for (int x = 0; x < dims[0]; ++x)
    for (int y = 0; y < dims[1]; ++y)
      for (int z = 0; z < dims[2]; ++z) {
        if (!occupied_at({x, y, z})) continue;
        for (int corner = 0; corner < 8; ++corner) {
          const Vec3 p = origin + Vec3((x + (corner & 1)) * cube, (y + ((corner >> 1) & 1)) * cube,
                                       (z + ((corner >> 2) & 1)) * cube);
          r = std::max(r, distance(p, c));
        }
      }
  return r;
}

VoxelObject place_object(const std::vector<Cell>& cells, const Vec3& center, double cube) {
  const auto canon = canonicalize(cells);
  VoxelObject obj;
  obj.cube = cube;
  obj.dims = {0, 0, 0};
  for (const auto& c : canon)
    for (int i = 0; i < 3; ++i) obj.dims[i] = std::max(obj.dims[i], c[i] + 1);
  obj.occupied.assign(static_cast<std::size_t>(obj.dims[0]) * obj.dims[1] * obj.dims[2], 0);
  for (const auto& c : canon)
    obj.occupied[(static_cast<std::size_t>(c[0]) * obj.dims[1] + c[1]) * obj.dims[2] + c[2]] = 1;
  obj.origin = center - Vec3(obj.dims[0] * cube, obj.dims[1] * cube, obj.dims[2] * cube) * 0.5;
  return obj;
}

namespace {

// Slab test; returns (t_enter, t_exit, entry axis) or nullopt on a miss.
struct SlabHit {
  double t0;
  double t1;
  int axis;
};

std::optional<SlabHit> intersect_box(const Vec3& lo, const Vec3& hi, const Ray& ray) {
  double t0 = -std::numeric_limits<double>::infinity();
  double t1 = std::numeric_limits<double>::infinity();
  int axis = 0;
  for (int i = 0; i < 3; ++i) {
    const double o = ray.origin[i];
    const double d = ray.dir[i];
    if (std::abs(d) < 1e-15) {
      if (o < lo[i] || o > hi[i]) return std::nullopt;
      continue;
    }
    double a = (lo[i] - o) / d;
    double b = (hi[i] - o) / d;
    if (a > b) std::swap(a, b);
    if (a > t0) {
      t0 = a;
      axis = i;
    }
    t1 = std::min(t1, b);
  }
  if (t0 > t1 || t1 < 0.0) return std::nullopt;
  return SlabHit{t0, t1, axis};
}

}  // namespace

void traverse_voxels(const VoxelObject& obj, const Ray& ray,
                     const std::function<bool(const Cell&, double)>& visit) {
  const auto box = intersect_box(obj.origin, obj.max_corner(), ray);
  if (!box) return;
  const double t_start = std::max(box->t0, 0.0);
  const Vec3 p = ray.origin + ray.dir * t_start;
  Cell cell{};
  std::array<int, 3> step{};
  std::array<double, 3> t_max{};
  std::array<double, 3> t_delta{};
  for (int i = 0; i < 3; ++i) {
    int c = static_cast<int>(std::floor((p[i] - obj.origin[i]) / obj.cube));
    c = std::clamp(c, 0, obj.dims[i] - 1);
    cell[i] = c;
    const double d = ray.dir[i];
    if (d > 0) {
      step[i] = 1;
      t_max[i] = (obj.origin[i] + (c + 1) * obj.cube - ray.origin[i]) / d;
      t_delta[i] = obj.cube / d;
    } else if (d < 0) {
      step[i] = -1;
      t_max[i] = (obj.origin[i] + c * obj.cube - ray.origin[i]) / d;
      t_delta[i] = -obj.cube / d;
    } else {
      step[i] = 0;
      t_max[i] = std::numeric_limits<double>::infinity();
      t_delta[i] = std::numeric_limits<double>::infinity();
    }
  }
  double t_enter = t_start;
  while (true) {
    if (!visit(cell, t_enter)) return;
    int axis = 0;
    if (t_max[1] < t_max[axis]) axis = 1;
    if (t_max[2] < t_max[axis]) axis = 2;
    if (t_max[axis] > box->t1) return;
    t_enter = t_max[axis];
    cell[axis] += step[axis];
    if (cell[axis] < 0 || cell[axis] >= obj.dims[axis]) return;
    t_max[axis] += t_delta[axis];
  }
}

std::optional<VoxelHit> intersect_voxels(const VoxelObject& obj, const Ray& ray) {
  const auto box = intersect_box(obj.origin, obj.max_corner(), ray);
  if (!box) return std::nullopt;
  std::optional<VoxelHit> hit;
  Cell prev{};
  bool first = true;
  traverse_voxels(obj, ray, [&](const Cell& c, double t) {
    if (obj.occupied_at(c)) {
      Vec3 n;
      if (first) {
        const int axis = box->t0 >= 0.0 ? box->axis : -1;
        if (axis >= 0) {
          n[axis] = ray.dir[axis] > 0 ? -1.0 : 1.0;
        } else {
          n = -ray.dir;
        }
      } else {
        for (int i = 0; i < 3; ++i)
          if (c[i] != prev[i]) n[i] = c[i] > prev[i] ? -1.0 : 1.0;
      }
      hit = VoxelHit{t, c, n};
      return false;
    }
    prev = c;
    first = false;
    return true;
  });
  return hit;
}

Ray pixel_ray(const Camera& camera, double row, double col) {
  const Vec3 fwd = camera.forward();
  const Vec3 world_up(0.0, 1.0, 0.0);
  Vec3 right = cross(fwd, world_up);
  const double rn = norm(right);
  // Pitch is limited to +-89 degrees so the cross product never degenerates.
  right = right / rn;
  const Vec3 up = cross(right, fwd);
  const double half = std::tan(deg_to_rad(camera.fov) * 0.5);
  const double aspect = static_cast<double>(camera.width) / camera.height;
  const double sx = ((col + 0.5) / camera.width * 2.0 - 1.0) * half * aspect;
  const double sy = (1.0 - (row + 0.5) / camera.height * 2.0) * half;
  return {camera.position, normalized(fwd + right * sx + up * sy)};
}

namespace {

void validate(const Camera& camera) {
  if (camera.width <= 0 || camera.height <= 0)
    throw std::invalid_argument("render: zero-area image");
  if (!(camera.fov > 10.0 && camera.fov < 120.0))
    throw std::invalid_argument("render: fov must lie in (10, 120) degrees");
  if (camera.pitch < -89.0 || camera.pitch > 89.0)
    throw std::invalid_argument("render: pitch must lie in [-89, 89] degrees");
}

std::uint8_t room_gray(const Scene& scene, const Ray& ray) {
  double best = std::numeric_limits<double>::infinity();
  std::uint8_t gray = 0;
  for (int i = 0; i < 3; ++i) {
    const double d = ray.dir[i];
    if (std::abs(d) < 1e-15) continue;
    const double plane = d > 0 ? scene.room_size[i] : 0.0;
    const double t = (plane - ray.origin[i]) / d;
    if (t >= 0.0 && t < best) {
      best = t;
      if (i == 1) {
        gray = d > 0 ? kCeilingGray : kFloorGray;
      } else {
        gray = kWallGray;
      }
    }
  }
  return gray;
}

std::uint8_t shade(const Scene& scene, const Vec3& normal) {
  const double lambert = std::max(0.0, -dot(normal, scene.light_dir));
  const double v = kAmbient + (1.0 - kAmbient) * lambert;
  return static_cast<std::uint8_t>(std::clamp(std::lround(255.0 * v), long{kObjectMinGray}, 255L));
}

}  // namespace

RenderOutput render_with_ids(const Scene& scene, const Camera& camera) {
  validate(camera);
  RenderOutput out;
  out.image.width = camera.width;
  out.image.height = camera.height;
  out.image.rgba.assign(static_cast<std::size_t>(camera.width) * camera.height * 4, 255);
  out.ids.assign(static_cast<std::size_t>(camera.width) * camera.height, HitId::Room);
  for (int row = 0; row < camera.height; ++row) {
    for (int col = 0; col < camera.width; ++col) {
      const Ray ray = pixel_ray(camera, row, col);
      const auto ha = intersect_voxels(scene.object_a, ray);
      const auto hb = intersect_voxels(scene.object_b, ray);
      const VoxelHit* hit = nullptr;
      HitId id = HitId::Room;
      if (ha && (!hb || ha->t <= hb->t)) {
        hit = &*ha;
        id = HitId::ObjectA;
      } else if (hb) {
        hit = &*hb;
        id = HitId::ObjectB;
      }
      const std::uint8_t gray = hit ? shade(scene, hit->normal) : room_gray(scene, ray);
      const std::size_t px = static_cast<std::size_t>(row) * camera.width + col;
      out.image.rgba[px * 4 + 0] = gray;
      out.image.rgba[px * 4 + 1] = gray;
      out.image.rgba[px * 4 + 2] = gray;
      out.ids[px] = id;
    }
  }
  return out;
}

Image render(const Scene& scene, const Camera& camera) {
  return render_with_ids(scene, camera).image;
}

std::pair<double, double> look_at(const Vec3& position, const Vec3& target) {
  const Vec3 d = target - position;
  const double len = norm(d);
  if (len < 1e-12) throw std::invalid_argument("look_at: position and target coincide");
  const double horizontal = std::hypot(d.x, d.z);
  const double yaw = horizontal < 1e-12 ? 0.0 : rad_to_deg(std::atan2(d.x, d.z));
  const double pitch = std::clamp(rad_to_deg(std::atan2(d.y, horizontal)), -89.0, 89.0);
  return {pitch, yaw};
}

}  // namespace samediff
