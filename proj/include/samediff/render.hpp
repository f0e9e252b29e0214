#pragma once

// Deterministic CPU raycaster for two voxel objects inside a box room.

#include <cstdint>
#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include "samediff/geometry.hpp"
#include "samediff/objects.hpp"

namespace samediff {

struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgba;  // row-major, 4 bytes per pixel

  std::uint8_t at(int row, int col, int channel) const {
    return rgba[(static_cast<std::size_t>(row) * width + col) * 4 + channel];
  }
  bool operator==(const Image&) const = default;
};

// 64-bit FNV-1a over dimensions and pixel bytes.
std::uint64_t image_hash(const Image& img);

struct Camera {
  Vec3 position;
  double pitch = 0.0;  // degrees, positive looks up
  double yaw = 0.0;    // degrees, 0 looks along +z, 90 along +x
  double fov = 60.0;   // vertical field of view, degrees
  int width = 64;
  int height = 64;

  Vec3 forward() const;
};

// Axis-aligned voxel grid placed in the world.
struct VoxelObject {
  Vec3 origin;  // world position of the minimum corner of cell (0,0,0)
  double cube = kCubeSide;
  std::array<int, 3> dims{};
  std::vector<std::uint8_t> occupied;  // x-major: (x * dims[1] + y) * dims[2] + z

  bool occupied_at(const Cell& c) const;
  Vec3 center() const;
  Vec3 max_corner() const;
  // Largest distance from the center to any occupied cube corner.
  double circumradius() const;
};

// Builds a grid from canonical cells with the bounding-box center at `center`.
VoxelObject place_object(const std::vector<Cell>& cells, const Vec3& center, double cube = kCubeSide);

struct Scene {
  Vec3 room_size{3.0, 3.0, 4.0};  // x = width, y = height, z = depth
  VoxelObject object_a;
  VoxelObject object_b;
  Vec3 light_dir = normalized(Vec3(-0.35, -0.8, 0.5));  // direction light travels
};

// Shading constants. Object pixels are gray values in [kObjectMinGray, 255];
// background surfaces use flat grays strictly below it.
inline constexpr std::uint8_t kFloorGray = 60;
inline constexpr std::uint8_t kWallGray = 100;
inline constexpr std::uint8_t kCeilingGray = 130;
inline constexpr std::uint8_t kObjectMinGray = 140;
inline constexpr double kAmbient = 0.55;

enum class HitId : std::uint8_t { Room = 0, ObjectA = 1, ObjectB = 2 };

struct RenderOutput {
  Image image;
  std::vector<HitId> ids;  // per pixel
};

// Throws std::invalid_argument for zero-area images or out-of-range camera settings.
Image render(const Scene& scene, const Camera& camera);
RenderOutput render_with_ids(const Scene& scene, const Camera& camera);

struct Ray {
  Vec3 origin;
  Vec3 dir;  // unit length
};

struct VoxelHit {
  double t = 0.0;
  Cell cell{};
  Vec3 normal;
};

// Grid traversal in increasing ray parameter. The visitor receives each
// visited cell with its entry parameter and returns false to stop.
void traverse_voxels(const VoxelObject& obj, const Ray& ray,
                     const std::function<bool(const Cell&, double)>& visit);

std::optional<VoxelHit> intersect_voxels(const VoxelObject& obj, const Ray& ray);

// Primary ray through the center of pixel (row, col).
Ray pixel_ray(const Camera& camera, double row, double col);

// Pitch/yaw in degrees aiming the optical axis at target; pitch clamps to +-89.
// Throws std::invalid_argument when the points coincide.
std::pair<double, double> look_at(const Vec3& position, const Vec3& target);

}  // namespace samediff
