#include "vecqmdp/vec_tree.hpp"

#include <algorithm>
#include <cstdio>
#include <stdexcept>

namespace vecqmdp {

std::size_t tree_capacity(int depth, int branching) {
  if (depth < 0 || branching < 1) throw std::invalid_argument("tree depth >= 0 and branching >= 1 required");
  constexpr std::uint64_t kLimit = std::numeric_limits<NodeIndex>::max();
  std::uint64_t total = 0;
  std::uint64_t level = 1;
  for (int d = 0; d <= depth; ++d) {
    total += level;
    if (total >= kLimit) throw std::overflow_error("tree capacity exceeds the node index range");
    if (d < depth) {
      if (level > kLimit / static_cast<std::uint64_t>(branching)) {
        throw std::overflow_error("tree capacity exceeds the node index range");
      }
      level *= static_cast<std::uint64_t>(branching);
    }
  }
  return static_cast<std::size_t>(total);
}

NodeIndex child_index(NodeIndex v, int action, int branching, std::size_t capacity) {
  if (action < 1 || action > branching) throw std::out_of_range("action index outside 1..branching");
  const std::uint64_t c = static_cast<std::uint64_t>(branching) * v + static_cast<std::uint64_t>(action);
  if (c >= capacity) throw std::out_of_range("child index beyond tree capacity (depth overflow)");
  return static_cast<NodeIndex>(c);
}

int edge_contribution(int depth, int horizon) {
  if (depth < 0 || depth > horizon) throw std::out_of_range("node depth outside [0, H]");
  return horizon - depth;
}

ScenarioTree::ScenarioTree(int depth, int branching)
    : depth_limit_(depth), branching_(branching), capacity_(tree_capacity(depth, branching)) {
  if (depth > 0x7ffe) throw std::invalid_argument("tree depth too large");
  const std::size_t n = capacity_;
  q_.assign(n * static_cast<std::size_t>(branching), 0.0);
  visits_.assign(n * static_cast<std::size_t>(branching), 0);
  reward_.assign(n, 0.0);
  leaf_value_.assign(n, 0.0);
  value_.assign(n, 0.0);
  expanded_.assign(n, 0);
  terminal_.assign(n, 0);
  tried_.assign(n, 0);
  const DepthRange e = empty_range();
  d_min_.assign(n, e.lo);
  d_max_.assign(n, e.hi);
  ego_x_.assign(n, 0.0);
  ego_y_.assign(n, 0.0);
  ego_heading_.assign(n, 0.0);
  ego_speed_.assign(n, 0.0);
  depth_.assign(n, 0);
  std::size_t first = 0;
  std::size_t width = 1;
  for (int d = 0; d <= depth; ++d) {
    std::fill(depth_.begin() + static_cast<std::ptrdiff_t>(first),
              depth_.begin() + static_cast<std::ptrdiff_t>(first + width), static_cast<std::int16_t>(d));
    first += width;
    width *= static_cast<std::size_t>(branching);
  }
  touched_.reserve(n);
}

void ScenarioTree::clear_node(NodeIndex v) {
  const std::size_t r = row(v);
  std::fill_n(q_.begin() + static_cast<std::ptrdiff_t>(r), branching_, 0.0);
  std::fill_n(visits_.begin() + static_cast<std::ptrdiff_t>(r), branching_, 0u);
  reward_[v] = 0.0;
  leaf_value_[v] = 0.0;
  value_[v] = 0.0;
  expanded_[v] = 0;
  terminal_[v] = 0;
  tried_[v] = 0;
  const DepthRange e = empty_range();
  d_min_[v] = e.lo;
  d_max_[v] = e.hi;
  ego_x_[v] = ego_y_[v] = ego_heading_[v] = ego_speed_[v] = 0.0;
}

void ScenarioTree::reset() {
  for (NodeIndex v : touched_) clear_node(v);
  touched_.clear();
  clear_node(0);
}

void ScenarioTree::init_root(const EgoState& ego) {
  reset();
  expanded_[0] = 1;
  ego_x_[0] = ego.x;
  ego_y_[0] = ego.y;
  ego_heading_[0] = ego.heading;
  ego_speed_[0] = ego.speed;
  touched_.push_back(0);
  update_depth_range(0);
}

std::uint32_t ScenarioTree::node_visits(NodeIndex v) const {
  std::uint32_t n = 0;
  for (int a = 0; a < branching_; ++a) n += visits(v, a);
  return n;
}

double ScenarioTree::best_q(NodeIndex v, int a, double gamma) const {
  const NodeIndex c = child(v, a);
  return reward_[c] + gamma * value_[c];
}

void ScenarioTree::expand_child(NodeIndex parent_node, NodeIndex c, const EgoState& ego, double r,
                                bool is_terminal, double leaf) {
  expanded_[c] = 1;
  terminal_[c] = is_terminal ? 1 : 0;
  reward_[c] = r;
  leaf_value_[c] = leaf;
  value_[c] = leaf;
  ego_x_[c] = ego.x;
  ego_y_[c] = ego.y;
  ego_heading_[c] = ego.heading;
  ego_speed_[c] = ego.speed;
  tried_[parent_node] = static_cast<std::uint8_t>(tried_[parent_node] + 1);
  touched_.push_back(c);
}

void ScenarioTree::record_visit(NodeIndex v, int a, double g) {
  const std::size_t i = row(v) + static_cast<std::size_t>(a);
  visits_[i] += 1;
  q_[i] += (g - q_[i]) / static_cast<double>(visits_[i]);
}

void ScenarioTree::refresh_value(NodeIndex v, double gamma) {
  const int n = tried_[v];
  if (n == 0) {
    value_[v] = leaf_value_[v];
    return;
  }
  double best = best_q(v, 0, gamma);
  for (int a = 1; a < n; ++a) best = std::max(best, best_q(v, a, gamma));
  value_[v] = best;
}

bool ScenarioTree::update_depth_range(NodeIndex v) {
  DepthRange r = empty_range();
  if (is_frontier(v)) r = {depth_[v], depth_[v]};
  const int n = tried_[v];
  for (int a = 0; a < n; ++a) {
    const NodeIndex c = child(v, a);
    if (d_min_[c] > d_max_[c]) continue;
    r.lo = std::min(r.lo, d_min_[c]);
    r.hi = std::max(r.hi, d_max_[c]);
  }
  const bool changed = r.lo != d_min_[v] || r.hi != d_max_[v];
  d_min_[v] = r.lo;
  d_max_[v] = r.hi;
  return changed;
}

std::string ScenarioTree::dump() const {
  std::string out;
  char buf[64];
  std::vector<NodeIndex> nodes(touched_.begin(), touched_.end());
  std::sort(nodes.begin(), nodes.end());
  nodes.erase(std::unique(nodes.begin(), nodes.end()), nodes.end());
  for (NodeIndex v : nodes) {
    if (!expanded(v)) continue;
    std::snprintf(buf, sizeof buf, "%u %d %c%c", v, depth(v), expanded(v) ? 'E' : '-', terminal(v) ? 'T' : '-');
    out += buf;
    out += " q";
    for (int a = 0; a < branching_; ++a) {
      std::snprintf(buf, sizeof buf, " %.6g", q(v, a));
      out += buf;
    }
    out += " n";
    for (int a = 0; a < branching_; ++a) {
      std::snprintf(buf, sizeof buf, " %u", visits(v, a));
      out += buf;
    }
    const DepthRange r = range(v);
    if (r.empty()) {
      out += " D empty\n";
    } else {
      std::snprintf(buf, sizeof buf, " D %d %d\n", r.lo, r.hi);
      out += buf;
    }
  }
  return out;
}

}  // namespace vecqmdp
