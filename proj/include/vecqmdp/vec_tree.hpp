#pragma once

// Pre-allocated, pointer-free scenario tree. Nodes are flattened level by
// level; the children of node v occupy the contiguous block
// [b*v + 1, b*v + b], so topology is implicit. Per-node statistics live in
// parallel arrays (structure of arrays).

#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "vecqmdp/scenario_model.hpp"

namespace vecqmdp {

using NodeIndex = std::uint32_t;
inline constexpr NodeIndex kNoNode = std::numeric_limits<NodeIndex>::max();

/// Sum of branching^d for d = 0..depth. Throws std::overflow_error when the
/// count does not fit the node index type.
std::size_t tree_capacity(int depth, int branching);

/// Child `action` (1-based, 1..branching) of node v: branching * v + action.
/// Throws std::out_of_range when the result would reach `capacity`.
NodeIndex child_index(NodeIndex v, int action, int branching,
                      std::size_t capacity = std::numeric_limits<NodeIndex>::max());

/// Edges credited for expanding a node at `depth` (expansion + rollout path).
int edge_contribution(int depth, int horizon);

/// Closed interval of frontier depths; empty when lo > hi.
struct DepthRange {
  std::int16_t lo = 0;
  std::int16_t hi = -1;

  bool empty() const { return lo > hi; }
  bool contains(int d) const { return lo <= d && d <= hi; }
  friend bool operator==(const DepthRange&, const DepthRange&) = default;
};

class ScenarioTree {
 public:
  ScenarioTree(int depth, int branching);

  int max_depth() const { return depth_limit_; }
  int branching() const { return branching_; }
  std::size_t capacity() const { return capacity_; }
  DepthRange empty_range() const { return {static_cast<std::int16_t>(depth_limit_ + 1), -1}; }

  /// Clears every node touched since the last reset; afterwards the tree is
  /// indistinguishable from a fresh allocation.
  void reset();
  /// Marks the root visited with the given cached ego state.
  void init_root(const EgoState& ego);

  /// 0-based action index; the 1-based offset of the addressing formula is
  /// applied here.
  NodeIndex child(NodeIndex v, int action) const {
    return child_index(v, action + 1, branching_, capacity_);
  }
  NodeIndex parent(NodeIndex v) const { return (v - 1) / static_cast<NodeIndex>(branching_); }
  /// Action leading from parent(v) to v.
  int action_of(NodeIndex v) const { return static_cast<int>((v - 1) % static_cast<NodeIndex>(branching_)); }

  int depth(NodeIndex v) const { return depth_[v]; }
  bool expanded(NodeIndex v) const { return expanded_[v] != 0; }
  bool terminal(NodeIndex v) const { return terminal_[v] != 0; }
  int tried(NodeIndex v) const { return tried_[v]; }
  double reward(NodeIndex v) const { return reward_[v]; }
  double leaf_value(NodeIndex v) const { return leaf_value_[v]; }
  /// Best discovered return from v (max over tried children, else leaf value).
  double value(NodeIndex v) const { return value_[v]; }
  DepthRange range(NodeIndex v) const { return {d_min_[v], d_max_[v]}; }
  EgoState ego(NodeIndex v) const { return {ego_x_[v], ego_y_[v], ego_heading_[v], ego_speed_[v]}; }

  double q(NodeIndex v, int a) const { return q_[row(v) + static_cast<std::size_t>(a)]; }
  std::uint32_t visits(NodeIndex v, int a) const { return visits_[row(v) + static_cast<std::size_t>(a)]; }
  std::uint32_t node_visits(NodeIndex v) const;
  /// r(v,a) + gamma * value(child); requires action a tried.
  double best_q(NodeIndex v, int a, double gamma) const;

  /// True when v is visited, live, above the horizon and has untried actions.
  bool is_frontier(NodeIndex v) const {
    return expanded_[v] && !terminal_[v] && depth_[v] < depth_limit_ && tried_[v] < branching_;
  }

  /// Materializes the child reached by the next untried action of `parent`.
  void expand_child(NodeIndex parent, NodeIndex child, const EgoState& ego, double reward,
                    bool terminal, double leaf_value);
  /// N(v,a) += 1 and running-mean update of Q(v,a) with return g.
  void record_visit(NodeIndex v, int a, double g);
  /// Recomputes value(v) from its tried children.
  void refresh_value(NodeIndex v, double gamma);
  /// D(v) <- own frontier depth union children's ranges; returns whether it changed.
  bool update_depth_range(NodeIndex v);

  /// Flat text dump of every visited node, for golden tests and debugging.
  std::string dump() const;

 private:
  std::size_t row(NodeIndex v) const { return static_cast<std::size_t>(v) * static_cast<std::size_t>(branching_); }
  void clear_node(NodeIndex v);

  int depth_limit_;
  int branching_;
  std::size_t capacity_;

  std::vector<double> q_;
  std::vector<std::uint32_t> visits_;
  std::vector<double> reward_, leaf_value_, value_;
  std::vector<std::uint8_t> expanded_, terminal_, tried_;
  std::vector<std::int16_t> depth_, d_min_, d_max_;
  std::vector<double> ego_x_, ego_y_, ego_heading_, ego_speed_;
  std::vector<NodeIndex> touched_;
};

}  // namespace vecqmdp
