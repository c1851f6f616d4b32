#pragma once

// Frenet-frame bounding boxes, a pointer-free STR tree for broad-phase
// pruning, and a masked batched SAT kernel for the narrow phase.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vecqmdp/geometry.hpp"
#include "vecqmdp/math.hpp"

namespace vecqmdp {

struct Aabb {
  double min_s = 0.0;
  double max_s = 0.0;
  double min_d = 0.0;
  double max_d = 0.0;

  /// Closed-interval overlap; touching boxes intersect.
  bool overlaps(const Aabb& o) const {
    return min_s <= o.max_s && o.min_s <= max_s && min_d <= o.max_d && o.min_d <= max_d;
  }
  bool valid() const { return min_s <= max_s && min_d <= max_d; }
  Aabb inflated(double m) const { return {min_s - m, max_s + m, min_d - m, max_d + m}; }
  /// Identity for merge(); overlaps nothing.
  static Aabb empty();
  void merge(const Aabb& o);

  friend bool operator==(const Aabb&, const Aabb&) = default;
};

struct Obb {
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;
  double half_length = 1.0;
  double half_width = 1.0;
};

/// Corner points in counter-clockwise order: front-left, rear-left,
/// rear-right, front-right.
std::vector<Vec2> obb_corners(const Obb& box);

/// Tight (s, d) bound of the four projected corners, inflated by `margin`.
/// `clamped` reports a corner projecting beyond a path end.
Aabb frenet_aabb(const Obb& box, const ReferencePath& path, double margin = 0.0,
                 bool* clamped = nullptr);

struct BoxEntry {
  Aabb box;
  int id = 0;
};

/// Sort-Tile-Recursive packed hierarchy stored as flat arrays. Children of a
/// node occupy one padded block of `branching` slots; leaf payloads occupy
/// padded blocks of `leaf_capacity` slots. Padding slots hold empty boxes.
class StrTree {
 public:
  StrTree() = default;

  bool empty() const { return entry_count_ == 0; }
  int branching() const { return branching_; }
  int leaf_capacity() const { return leaf_capacity_; }
  std::size_t node_count() const { return node_min_s_.size(); }
  std::size_t entry_slots() const { return entry_id_.size(); }
  std::size_t entry_count() const { return entry_count_; }
  int height() const { return height_; }

  Aabb node_box(std::size_t i) const {
    return {node_min_s_[i], node_max_s_[i], node_min_d_[i], node_max_d_[i]};
  }
  Aabb entry_box(std::size_t i) const {
    return {entry_min_s_[i], entry_max_s_[i], entry_min_d_[i], entry_max_d_[i]};
  }
  int entry_id(std::size_t i) const { return entry_id_[i]; }
  bool node_is_leaf(std::size_t i) const { return node_leaf_[i] != 0; }
  std::int32_t node_first(std::size_t i) const { return node_first_[i]; }
  std::int32_t node_count_of(std::size_t i) const { return node_children_[i]; }

  /// Appends ids of stored boxes intersecting q to `out` (traversal order).
  void query(const Aabb& q, std::vector<int>& out) const;

  /// One line per node: index, leaf flag, child range, box.
  std::string dump() const;

 private:
  friend StrTree build_str_tree(std::span<const BoxEntry>, int, int);

  int branching_ = 8;
  int leaf_capacity_ = 8;
  int height_ = 0;
  std::size_t entry_count_ = 0;

  std::vector<double> node_min_s_, node_max_s_, node_min_d_, node_max_d_;
  std::vector<std::int32_t> node_first_, node_children_;
  std::vector<std::uint8_t> node_leaf_;

  std::vector<double> entry_min_s_, entry_max_s_, entry_min_d_, entry_max_d_;
  std::vector<int> entry_id_;
};

/// Bulk-loads an STR tree; deterministic for a fixed input order (equal
/// centers are ordered by id).
StrTree build_str_tree(std::span<const BoxEntry> boxes, int branching = 8, int leaf_capacity = 8);

std::vector<int> broad_phase_query(const StrTree& tree, const Aabb& query);

// ---------------------------------------------------------------------------
// Narrow phase

inline constexpr int kSatWidth = 8;

/// Projection test on one candidate axis (ux, uy). Shared by the scalar and
/// batched paths so both round identically.
VECQMDP_INLINE bool sat_separated(double dx, double dy, double ux, double uy, double ec, double es,
                                  double ehl, double ehw, double ac, double as, double ahl, double ahw) {
  const double dist = std::fabs(dx * ux + dy * uy);
  const double re = ehl * std::fabs(ec * ux + es * uy) + ehw * std::fabs(ec * uy - es * ux);
  const double ra = ahl * std::fabs(ac * ux + as * uy) + ahw * std::fabs(ac * uy - as * ux);
  return dist > re + ra;
}

/// W ego/agent pairs in SoA form with headings already resolved to cos/sin.
struct SatLanes {
  alignas(64) double ex[kSatWidth];
  alignas(64) double ey[kSatWidth];
  alignas(64) double ec[kSatWidth];
  alignas(64) double es[kSatWidth];
  alignas(64) double ehl[kSatWidth];
  alignas(64) double ehw[kSatWidth];
  alignas(64) double ax[kSatWidth];
  alignas(64) double ay[kSatWidth];
  alignas(64) double ac[kSatWidth];
  alignas(64) double as[kSatWidth];
  alignas(64) double ahl[kSatWidth];
  alignas(64) double ahw[kSatWidth];
  alignas(64) double active[kSatWidth];  // 1.0 active, 0.0 masked

  void set_ego(int lane, double x, double y, double c, double s, double hl, double hw) {
    ex[lane] = x; ey[lane] = y; ec[lane] = c; es[lane] = s; ehl[lane] = hl; ehw[lane] = hw;
  }
  void set_agent(int lane, double x, double y, double c, double s, double hl, double hw) {
    ax[lane] = x; ay[lane] = y; ac[lane] = c; as[lane] = s; ahl[lane] = hl; ahw[lane] = hw;
  }
  /// Masks every lane and fills inert geometry.
  void clear();
};

/// Masked SAT over the four candidate axes with per-lane early exit. Writes
/// 1 to hit[l] for overlapping active lanes, 0 otherwise. Returns the number
/// of axes evaluated before every lane had exited.
int sat_kernel(const SatLanes& lanes, std::uint8_t* hit);

/// Batched SAT over up to kSatWidth pairs; inactive or missing slots report
/// false.
std::vector<std::uint8_t> sat_overlap_batch(std::span<const Obb> ego, std::span<const Obb> agents,
                                            std::span<const std::uint8_t> active);

/// Scalar SAT on one pair.
bool obb_overlap(const Obb& a, const Obb& b);

}  // namespace vecqmdp
