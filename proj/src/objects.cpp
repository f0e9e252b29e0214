#include "samediff/objects.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace samediff {

std::string_view to_string(Difficulty d) {
  switch (d) {
    case Difficulty::Easy:
      return "easy";
    case Difficulty::Medium:
      return "medium";
    case Difficulty::Hard:
      return "hard";
  }
  return "easy";
}

std::string_view to_string(Label l) { return l == Label::Same ? "same" : "different"; }

Difficulty difficulty_from_string(std::string_view s) {
  if (s == "easy") return Difficulty::Easy;
  if (s == "medium") return Difficulty::Medium;
  if (s == "hard") return Difficulty::Hard;
  throw std::invalid_argument("unknown difficulty: " + std::string(s));
}

Label label_from_string(std::string_view s) {
  if (s == "same") return Label::Same;
  if (s == "different") return Label::Different;
  throw std::invalid_argument("unknown label: " + std::string(s));
}

int cube_count(Difficulty d) {
  switch (d) {
    case Difficulty::Easy:
      return 7;
    case Difficulty::Medium:
      return 9;
    case Difficulty::Hard:
      return 11;
  }
  return 7;
}

// --- Rotation ---

Rotation Rotation::quarter_turn(int axis, int turns) {
  Rotation step;
  const int a = (axis + 1) % 3;
  const int b = (axis + 2) % 3;
  // e_a -> e_b, e_b -> -e_a
  step.m[a][a] = 0;
  step.m[b][b] = 0;
  step.m[b][a] = 1;
  step.m[a][b] = -1;
  Rotation r;
  for (int i = 0; i < ((turns % 4) + 4) % 4; ++i) r = step.compose(r);
  return r;
}

Cell Rotation::apply(const Cell& c) const {
  Cell out{};
  for (int i = 0; i < 3; ++i) out[i] = m[i][0] * c[0] + m[i][1] * c[1] + m[i][2] * c[2];
  return out;
}

Rotation Rotation::compose(const Rotation& rhs) const {
  Rotation out;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      int s = 0;
      for (int k = 0; k < 3; ++k) s += m[i][k] * rhs.m[k][j];
      out.m[i][j] = s;
    }
  return out;
}

Rotation Rotation::inverse() const {
  Rotation out;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) out.m[i][j] = m[j][i];
  return out;
}

int Rotation::determinant() const {
  return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
         m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
         m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

const std::vector<Rotation>& rotation_group() {
  static const std::vector<Rotation> group = [] {
    std::vector<Rotation> g;
    std::array<int, 3> perm = {0, 1, 2};
    do {
      for (int signs = 0; signs < 8; ++signs) {
        Rotation r;
        for (int i = 0; i < 3; ++i) {
          r.m[i] = {0, 0, 0};
          r.m[i][perm[i]] = (signs >> i) & 1 ? -1 : 1;
        }
        if (r.determinant() == 1) g.push_back(r);
      }
    } while (std::next_permutation(perm.begin(), perm.end()));
    return g;
  }();
  return group;
}

std::vector<Rotation> rotations_with_angle(int degrees) {
  std::vector<Rotation> out;
  for (const auto& r : rotation_group())
    if (relative_orientation(r) == degrees) out.push_back(r);
  return out;
}

int relative_orientation(const Rotation& r) {
  const double c = std::clamp((r.trace() - 1) / 2.0, -1.0, 1.0);
  return static_cast<int>(std::lround(std::acos(c) * 180.0 / 3.14159265358979323846));
}

// --- Polycubes ---

std::vector<Cell> canonicalize(std::vector<Cell> cells) {
  if (cells.empty()) return cells;
  Cell lo = cells.front();
  for (const auto& c : cells)
    for (int i = 0; i < 3; ++i) lo[i] = std::min(lo[i], c[i]);
  for (auto& c : cells)
    for (int i = 0; i < 3; ++i) c[i] -= lo[i];
  std::sort(cells.begin(), cells.end());
  return cells;
}

namespace {

std::vector<Cell> rotate_cells(const std::vector<Cell>& cells, const Rotation& r) {
  std::vector<Cell> out;
  out.reserve(cells.size());
  for (const auto& c : cells) out.push_back(r.apply(c));
  return canonicalize(std::move(out));
}

}  // namespace

PolycubeObject rotate(const PolycubeObject& o, const Rotation& r) {
  return {o.id, rotate_cells(o.cells, r), o.difficulty};
}

PolycubeObject mirror(const PolycubeObject& o) {
  std::vector<Cell> cells = o.cells;
  for (auto& c : cells) c[0] = -c[0];
  const int id = o.id >= kMirrorIdBase ? o.id - kMirrorIdBase : o.id + kMirrorIdBase;
  return {id, canonicalize(std::move(cells)), o.difficulty};
}

bool is_face_connected(const std::vector<Cell>& cells) {
  if (cells.empty()) return false;
  std::set<Cell> remaining(cells.begin(), cells.end());
  if (remaining.size() != cells.size()) return false;  // duplicates
  std::vector<Cell> frontier = {*remaining.begin()};
  remaining.erase(remaining.begin());
  while (!frontier.empty()) {
    const Cell c = frontier.back();
    frontier.pop_back();
    for (int axis = 0; axis < 3; ++axis)
      for (int s : {-1, 1}) {
        Cell n = c;
        n[axis] += s;
        if (auto it = remaining.find(n); it != remaining.end()) {
          frontier.push_back(n);
          remaining.erase(it);
        }
      }
  }
  return remaining.empty();
}

std::vector<Cell> rotation_canonical_form(const std::vector<Cell>& cells) {
  std::vector<Cell> best;
  for (const auto& r : rotation_group()) {
    auto c = rotate_cells(cells, r);
    if (best.empty() || c < best) best = std::move(c);
  }
  return best;
}

bool congruence_check(const PolycubeObject& a, const PolycubeObject& b) {
  if (a.cells.size() != b.cells.size()) return false;
  return rotation_canonical_form(a.cells) == rotation_canonical_form(b.cells);
}

bool is_chiral(const PolycubeObject& o) { return !congruence_check(o, mirror(o)); }

namespace {

// Random walk of straight arms, each 2-4 cubes long counting the shared
// corner, turning by a right angle between arms.
std::vector<Cell> random_arm_polycube(int n_cubes, Rng& rng) {
  std::set<Cell> occupied;
  Cell pos = {0, 0, 0};
  occupied.insert(pos);
  int prev_axis = -1;
  while (static_cast<int>(occupied.size()) < n_cubes) {
    int axis = static_cast<int>(rng.uniform_int(std::uint64_t{3}));
    if (prev_axis >= 0) {
      axis = static_cast<int>(rng.uniform_int(std::uint64_t{2}));
      if (axis >= prev_axis) ++axis;
    }
    const int sign = rng.bernoulli(0.5) ? 1 : -1;
    const int remaining = n_cubes - static_cast<int>(occupied.size());
    const int added = std::min(rng.uniform_int(1, 3), remaining);
    for (int i = 0; i < added; ++i) {
      pos[axis] += sign;
      if (!occupied.insert(pos).second) return {};
    }
    prev_axis = axis;
  }
  return canonicalize(std::vector<Cell>(occupied.begin(), occupied.end()));
}

}  // namespace

ObjectSet generate_object_set(std::uint64_t seed) {
  constexpr int kPerDifficulty = 4;
  constexpr int kMaxAttempts = 20000;
  Rng rng(seed);
  ObjectSet set;
  std::vector<std::vector<Cell>> forms;  // rotation canonical forms seen so far
  for (Difficulty d : kAllDifficulties) {
    for (int k = 0; k < kPerDifficulty; ++k) {
      bool placed = false;
      for (int attempt = 0; attempt < kMaxAttempts && !placed; ++attempt) {
        auto cells = random_arm_polycube(cube_count(d), rng);
        if (cells.empty()) continue;
        PolycubeObject candidate{static_cast<int>(set.size()), std::move(cells), d};
        if (!is_chiral(candidate)) continue;
        auto form = rotation_canonical_form(candidate.cells);
        if (std::find(forms.begin(), forms.end(), form) != forms.end()) continue;
        forms.push_back(std::move(form));
        set.push_back(std::move(candidate));
        placed = true;
      }
      if (!placed)
        throw std::runtime_error("generate_object_set: constraints unsatisfiable after " +
                                 std::to_string(kMaxAttempts) + " attempts");
    }
  }
  return set;
}

const ObjectSet& default_object_set() {
  static const ObjectSet set = generate_object_set(kDefaultObjectSeed);
  return set;
}

PolycubeObject resolve_object(const ObjectSet& set, int id) {
  const int base = id >= kMirrorIdBase ? id - kMirrorIdBase : id;
  auto it = std::find_if(set.begin(), set.end(), [&](const auto& o) { return o.id == base; });
  if (it == set.end()) throw std::out_of_range("unknown object id " + std::to_string(id));
  return id >= kMirrorIdBase ? mirror(*it) : *it;
}

nlohmann::json object_set_to_json(const ObjectSet& set) {
  nlohmann::json objects = nlohmann::json::array();
  for (const auto& o : set) {
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& c : o.cells) cells.push_back({c[0], c[1], c[2]});
    objects.push_back({{"id", o.id}, {"difficulty", to_string(o.difficulty)}, {"cells", cells}});
  }
  return {{"objects", objects}};
}

ObjectSet object_set_from_json(const nlohmann::json& j) {
  ObjectSet set;
  for (const auto& jo : j.at("objects")) {
    PolycubeObject o;
    o.id = jo.at("id").get<int>();
    o.difficulty = difficulty_from_string(jo.at("difficulty").get<std::string>());
    for (const auto& jc : jo.at("cells"))
      o.cells.push_back({jc.at(0).get<int>(), jc.at(1).get<int>(), jc.at(2).get<int>()});
    if (!is_face_connected(o.cells))
      throw std::invalid_argument("object " + std::to_string(o.id) + " is not face-connected");
    o.cells = canonicalize(std::move(o.cells));
    set.push_back(std::move(o));
  }
  return set;
}

// --- Trials ---

Trial make_trial(const ObjectSet& set, Difficulty difficulty, int ro_deg, Label label, Rng& rng,
                 const TrialOptions& options) {
  if (std::find(kTestedOrientations.begin(), kTestedOrientations.end(), ro_deg) ==
      kTestedOrientations.end())
    throw std::invalid_argument("make_trial: unsupported relative orientation " +
                                std::to_string(ro_deg));
  std::vector<const PolycubeObject*> pool;
  for (const auto& o : set)
    if (o.difficulty == difficulty) pool.push_back(&o);
  if (pool.empty()) throw std::invalid_argument("make_trial: no objects of requested difficulty");

  Trial t;
  t.ro_deg = ro_deg;
  t.label = label;
  t.difficulty = difficulty;
  const auto ia = rng.uniform_int(pool.size());
  t.object_a = *pool[ia];
  if (label == Label::Same) {
    t.object_b = t.object_a;
  } else if (rng.bernoulli(options.mirror_fraction) || pool.size() < 2) {
    t.object_b = mirror(t.object_a);
  } else {
    auto ib = rng.uniform_int(pool.size() - 1);
    if (ib >= ia) ++ib;
    t.object_b = *pool[ib];
  }
  const auto candidates = rotations_with_angle(ro_deg);
  t.rotation_b = candidates[rng.uniform_int(candidates.size())];
  return t;
}

nlohmann::json trial_to_json(const Trial& t) {
  nlohmann::json rot = nlohmann::json::array();
  for (const auto& row : t.rotation_b.m) rot.push_back({row[0], row[1], row[2]});
  return {{"object_a", t.object_a.id},        {"object_b", t.object_b.id},
          {"rotation_b", rot},                {"ro_deg", t.ro_deg},
          {"label", to_string(t.label)},      {"difficulty", to_string(t.difficulty)}};
}

Trial trial_from_json(const ObjectSet& set, const nlohmann::json& j) {
  Trial t;
  t.object_a = resolve_object(set, j.at("object_a").get<int>());
  t.object_b = resolve_object(set, j.at("object_b").get<int>());
  const auto& rot = j.at("rotation_b");
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) t.rotation_b.m[i][k] = rot.at(i).at(k).get<int>();
  if (t.rotation_b.determinant() != 1) throw std::invalid_argument("rotation_b is not proper");
  t.ro_deg = j.at("ro_deg").get<int>();
  t.label = label_from_string(j.at("label").get<std::string>());
  t.difficulty = difficulty_from_string(j.at("difficulty").get<std::string>());
  if (relative_orientation(t.rotation_b) != t.ro_deg)
    throw std::invalid_argument("ro_deg does not match rotation_b");
  if ((t.label == Label::Same) != congruence_check(t.object_a, t.object_b))
    throw std::invalid_argument("label inconsistent with object congruence");
  return t;
}

}  // namespace samediff
