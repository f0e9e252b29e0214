#pragma once

// Polycube stimuli, the cube rotation group, congruence, and trial sampling.

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "samediff/rng.hpp"

namespace samediff {

enum class Difficulty { Easy, Medium, Hard };
enum class Label { Same, Different };

inline constexpr std::array<Difficulty, 3> kAllDifficulties = {Difficulty::Easy, Difficulty::Medium,
                                                               Difficulty::Hard};
inline constexpr std::array<int, 3> kTestedOrientations = {0, 90, 180};

// Side of one unit cube in world meters.
inline constexpr double kCubeSide = 0.05;

// Mirror images of set objects get id = kMirrorIdBase + original id.
inline constexpr int kMirrorIdBase = 100;

std::string_view to_string(Difficulty d);
std::string_view to_string(Label l);
Difficulty difficulty_from_string(std::string_view s);
Label label_from_string(std::string_view s);

// Number of cubes used for each difficulty tier.
int cube_count(Difficulty d);

using Cell = std::array<int, 3>;

// Proper rotation of the cube: a signed permutation matrix with det = +1.
struct Rotation {
  std::array<std::array<int, 3>, 3> m{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};

  static Rotation identity() { return {}; }
  // Quarter turns about a coordinate axis (0 = x, 1 = y, 2 = z), right-handed.
  static Rotation quarter_turn(int axis, int turns);

  Cell apply(const Cell& c) const;
  Rotation compose(const Rotation& rhs) const;  // this * rhs
  Rotation inverse() const;                     // transpose
  int trace() const { return m[0][0] + m[1][1] + m[2][2]; }
  int determinant() const;

  bool operator==(const Rotation&) const = default;
  auto operator<=>(const Rotation&) const = default;
};

// All 24 proper rotations; index 0 is the identity.
const std::vector<Rotation>& rotation_group();

// Rotations whose angle is exactly `degrees`.
std::vector<Rotation> rotations_with_angle(int degrees);

// Rotation angle in degrees, one of {0, 90, 120, 180}, from trace = 1 + 2 cos(theta).
int relative_orientation(const Rotation& r);

// Translate so the minimum corner is the origin, then sort cells.
std::vector<Cell> canonicalize(std::vector<Cell> cells);

struct PolycubeObject {
  int id = 0;
  std::vector<Cell> cells;  // canonical pose, sorted
  Difficulty difficulty = Difficulty::Easy;

  bool operator==(const PolycubeObject&) const = default;
};

PolycubeObject rotate(const PolycubeObject& o, const Rotation& r);
PolycubeObject mirror(const PolycubeObject& o);  // reflect x -> -x

bool is_face_connected(const std::vector<Cell>& cells);

// Lexicographically smallest canonical cell list over all 24 rotations.
std::vector<Cell> rotation_canonical_form(const std::vector<Cell>& cells);

// True iff some proper rotation maps b onto a.
bool congruence_check(const PolycubeObject& a, const PolycubeObject& b);

bool is_chiral(const PolycubeObject& o);

using ObjectSet = std::vector<PolycubeObject>;

// Twelve arm-like polycubes, four per difficulty, all chiral and mutually
// non-congruent. Throws std::runtime_error when rejection sampling gives up.
ObjectSet generate_object_set(std::uint64_t seed);

inline constexpr std::uint64_t kDefaultObjectSeed = 42;

// Lazily generated set for kDefaultObjectSeed.
const ObjectSet& default_object_set();

// Resolves an object id, including mirror ids, against the set.
PolycubeObject resolve_object(const ObjectSet& set, int id);

nlohmann::json object_set_to_json(const ObjectSet& set);
ObjectSet object_set_from_json(const nlohmann::json& j);

struct Trial {
  PolycubeObject object_a;
  PolycubeObject object_b;  // canonical pose, before rotation_b is applied
  Rotation rotation_b;
  int ro_deg = 0;
  Label label = Label::Same;
  Difficulty difficulty = Difficulty::Easy;
};

struct TrialOptions {
  // Share of Different trials that pair an object with its own mirror image.
  double mirror_fraction = 0.5;
};

// Throws std::invalid_argument for orientations other than 0, 90 or 180.
Trial make_trial(const ObjectSet& set, Difficulty difficulty, int ro_deg, Label label, Rng& rng,
                 const TrialOptions& options = {});

// Compact description sufficient to rebuild a trial against its object set.
nlohmann::json trial_to_json(const Trial& t);
Trial trial_from_json(const ObjectSet& set, const nlohmann::json& j);

}  // namespace samediff
