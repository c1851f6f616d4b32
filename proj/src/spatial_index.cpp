#include "vecqmdp/spatial_index.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace vecqmdp {

Aabb Aabb::empty() {
  constexpr double inf = std::numeric_limits<double>::infinity();
  return {inf, -inf, inf, -inf};
}

void Aabb::merge(const Aabb& o) {
  min_s = std::min(min_s, o.min_s);
  max_s = std::max(max_s, o.max_s);
  min_d = std::min(min_d, o.min_d);
  max_d = std::max(max_d, o.max_d);
}

std::vector<Vec2> obb_corners(const Obb& box) {
  const double c = std::cos(box.heading);
  const double s = std::sin(box.heading);
  std::vector<Vec2> out;
  out.reserve(4);
  for (auto [l, w] : {std::pair{1.0, 1.0}, {-1.0, 1.0}, {-1.0, -1.0}, {1.0, -1.0}}) {
    const double lx = l * box.half_length;
    const double wy = w * box.half_width;
    out.push_back({box.x + lx * c - wy * s, box.y + lx * s + wy * c});
  }
  return out;
}

Aabb frenet_aabb(const Obb& box, const ReferencePath& path, double margin, bool* clamped) {
  Aabb out = Aabb::empty();
  bool any_clamped = false;
  for (const Vec2& p : obb_corners(box)) {
    const FrenetPoint fp = frenet_project(p, path);
    any_clamped = any_clamped || fp.clamped;
    out.merge({fp.s, fp.s, fp.d, fp.d});
  }
  if (clamped != nullptr) *clamped = any_clamped;
  return out.inflated(margin);
}

// ---------------------------------------------------------------------------

namespace {

constexpr int kMaxSlots = 64;
// Depth-first stack bound: at most (height - 1) * branching pending nodes.
constexpr int kStackDepth = 64 * kMaxSlots;

struct BuildNode {
  Aabb box;
  std::vector<int> items;  // entries (leaf level) or nodes of the level below
};

double center_s(const Aabb& b) { return 0.5 * (b.min_s + b.max_s); }
double center_d(const Aabb& b) { return 0.5 * (b.min_d + b.max_d); }

/// One STR pass: groups `items` (with boxes and tie keys) into nodes of at
/// most `cap` members.
std::vector<BuildNode> str_pack(const std::vector<Aabb>& boxes, const std::vector<int>& keys, int cap) {
  const std::size_t n = boxes.size();
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  auto by_s = [&](int a, int b) {
    const double ca = center_s(boxes[a]);
    const double cb = center_s(boxes[b]);
    return ca != cb ? ca < cb : keys[a] < keys[b];
  };
  auto by_d = [&](int a, int b) {
    const double ca = center_d(boxes[a]);
    const double cb = center_d(boxes[b]);
    return ca != cb ? ca < cb : keys[a] < keys[b];
  };
  std::sort(order.begin(), order.end(), by_s);

  const std::size_t c = static_cast<std::size_t>(cap);
  const std::size_t pages = (n + c - 1) / c;
  const auto slices = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(pages))));
  const std::size_t slice_size = slices * c;

  std::vector<BuildNode> out;
  for (std::size_t start = 0; start < n; start += slice_size) {
    const std::size_t end = std::min(n, start + slice_size);
    std::sort(order.begin() + static_cast<std::ptrdiff_t>(start),
              order.begin() + static_cast<std::ptrdiff_t>(end), by_d);
    for (std::size_t p = start; p < end; p += c) {
      BuildNode node;
      node.box = Aabb::empty();
      for (std::size_t i = p; i < std::min(end, p + c); ++i) {
        node.items.push_back(order[i]);
        node.box.merge(boxes[static_cast<std::size_t>(order[i])]);
      }
      out.push_back(std::move(node));
    }
  }
  return out;
}

}  // namespace

StrTree build_str_tree(std::span<const BoxEntry> boxes, int branching, int leaf_capacity) {
  if (branching < 2) throw std::invalid_argument("STR branching must be at least 2");
  if (leaf_capacity < 1) throw std::invalid_argument("STR leaf capacity must be at least 1");
  if (branching > kMaxSlots || leaf_capacity > kMaxSlots) {
    throw std::invalid_argument("STR node width above the batched test width limit");
  }

  StrTree tree;
  tree.branching_ = branching;
  tree.leaf_capacity_ = leaf_capacity;
  tree.entry_count_ = boxes.size();

  auto push_node = [&](const Aabb& b, std::int32_t first, std::int32_t count, bool leaf) {
    tree.node_min_s_.push_back(b.min_s);
    tree.node_max_s_.push_back(b.max_s);
    tree.node_min_d_.push_back(b.min_d);
    tree.node_max_d_.push_back(b.max_d);
    tree.node_first_.push_back(first);
    tree.node_children_.push_back(count);
    tree.node_leaf_.push_back(leaf ? 1 : 0);
  };

  if (boxes.empty()) {
    push_node(Aabb::empty(), 0, 0, true);
    return tree;
  }

  // Bottom-up packing. levels[0] are leaves referencing entries.
  std::vector<std::vector<BuildNode>> levels;
  {
    std::vector<Aabb> b;
    std::vector<int> keys;
    for (const BoxEntry& e : boxes) {
      b.push_back(e.box);
      keys.push_back(e.id);
    }
    levels.push_back(str_pack(b, keys, leaf_capacity));
  }
  while (levels.back().size() > 1) {
    const auto& below = levels.back();
    std::vector<Aabb> b;
    std::vector<int> keys;
    for (std::size_t i = 0; i < below.size(); ++i) {
      b.push_back(below[i].box);
      keys.push_back(static_cast<int>(i));
    }
    levels.push_back(str_pack(b, keys, branching));
  }
  tree.height_ = static_cast<int>(levels.size());

  // Top-down layout: root at slot 0, then each node's children as one padded
  // block, breadth first.
  struct Pending {
    int level;
    int index;
    std::size_t slot;
  };
  const int top = static_cast<int>(levels.size()) - 1;
  push_node(levels[static_cast<std::size_t>(top)][0].box, 0, 0, top == 0);
  std::vector<Pending> queue{{top, 0, 0}};
  const Aabb pad = Aabb::empty();
  for (std::size_t qi = 0; qi < queue.size(); ++qi) {
    const Pending cur = queue[qi];
    const BuildNode& node = levels[static_cast<std::size_t>(cur.level)][static_cast<std::size_t>(cur.index)];
    const auto count = static_cast<std::int32_t>(node.items.size());
    if (cur.level == 0) {
      const auto first = static_cast<std::int32_t>(tree.entry_id_.size());
      for (int k = 0; k < leaf_capacity; ++k) {
        const bool real = k < count;
        const BoxEntry* e = real ? &boxes[static_cast<std::size_t>(node.items[static_cast<std::size_t>(k)])] : nullptr;
        const Aabb& b = real ? e->box : pad;
        tree.entry_min_s_.push_back(b.min_s);
        tree.entry_max_s_.push_back(b.max_s);
        tree.entry_min_d_.push_back(b.min_d);
        tree.entry_max_d_.push_back(b.max_d);
        tree.entry_id_.push_back(real ? e->id : -1);
      }
      tree.node_first_[cur.slot] = first;
      tree.node_children_[cur.slot] = count;
    } else {
      const auto first = static_cast<std::int32_t>(tree.node_min_s_.size());
      const auto& below = levels[static_cast<std::size_t>(cur.level - 1)];
      for (int k = 0; k < branching; ++k) {
        if (k < count) {
          const int child = node.items[static_cast<std::size_t>(k)];
          const std::size_t slot = tree.node_min_s_.size();
          push_node(below[static_cast<std::size_t>(child)].box, 0, 0, cur.level - 1 == 0);
          queue.push_back({cur.level - 1, child, slot});
        } else {
          push_node(pad, 0, 0, true);
        }
      }
      tree.node_first_[cur.slot] = first;
      tree.node_children_[cur.slot] = count;
    }
  }
  return tree;
}

void StrTree::query(const Aabb& q, std::vector<int>& out) const {
  if (entry_count_ == 0 || !q.overlaps(node_box(0))) return;
  // Fixed-size explicit stack; depth-first, children pushed in reverse so
  // traversal visits them in slot order.
  std::int32_t stack[kStackDepth];
  int top = 0;
  stack[top++] = 0;
  std::uint8_t hit[kMaxSlots];
  while (top > 0) {
    const std::int32_t n = stack[--top];
    const std::int32_t first = node_first_[static_cast<std::size_t>(n)];
    if (node_leaf_[static_cast<std::size_t>(n)]) {
      const double* mns = entry_min_s_.data() + first;
      const double* mxs = entry_max_s_.data() + first;
      const double* mnd = entry_min_d_.data() + first;
      const double* mxd = entry_max_d_.data() + first;
      const int width = leaf_capacity_;
#pragma omp simd
      for (int k = 0; k < width; ++k) {
        hit[k] = (q.min_s <= mxs[k]) & (mns[k] <= q.max_s) & (q.min_d <= mxd[k]) & (mnd[k] <= q.max_d);
      }
      for (int k = 0; k < width; ++k) {
        if (hit[k]) out.push_back(entry_id_[static_cast<std::size_t>(first + k)]);
      }
    } else {
      const double* mns = node_min_s_.data() + first;
      const double* mxs = node_max_s_.data() + first;
      const double* mnd = node_min_d_.data() + first;
      const double* mxd = node_max_d_.data() + first;
      const int width = branching_;
#pragma omp simd
      for (int k = 0; k < width; ++k) {
        hit[k] = (q.min_s <= mxs[k]) & (mns[k] <= q.max_s) & (q.min_d <= mxd[k]) & (mnd[k] <= q.max_d);
      }
      for (int k = width - 1; k >= 0; --k) {
        if (hit[k]) stack[top++] = first + k;
      }
    }
  }
}

std::string StrTree::dump() const {
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "str branching %d leaf %d height %d entries %zu\n", branching_,
                leaf_capacity_, height_, entry_count_);
  out += buf;
  for (std::size_t i = 0; i < node_count(); ++i) {
    if (node_children_[i] == 0 && i != 0) continue;
    std::snprintf(buf, sizeof buf, "node %zu %s first %d count %d box %.6g %.6g %.6g %.6g\n", i,
                  node_leaf_[i] ? "leaf" : "inner", node_first_[i], node_children_[i], node_min_s_[i],
                  node_max_s_[i], node_min_d_[i], node_max_d_[i]);
    out += buf;
    if (node_leaf_[i]) {
      for (std::int32_t k = 0; k < node_children_[i]; ++k) {
        const auto e = static_cast<std::size_t>(node_first_[i] + k);
        std::snprintf(buf, sizeof buf, "  entry %d box %.6g %.6g %.6g %.6g\n", entry_id_[e],
                      entry_min_s_[e], entry_max_s_[e], entry_min_d_[e], entry_max_d_[e]);
        out += buf;
      }
    }
  }
  return out;
}

std::vector<int> broad_phase_query(const StrTree& tree, const Aabb& query) {
  std::vector<int> out;
  tree.query(query, out);
  return out;
}

// ---------------------------------------------------------------------------

void SatLanes::clear() {
  for (int l = 0; l < kSatWidth; ++l) {
    set_ego(l, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0);
    set_agent(l, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0);
    active[l] = 0.0;
  }
}

int sat_kernel(const SatLanes& b, std::uint8_t* hit) {
  alignas(64) double alive[kSatWidth];
  for (int l = 0; l < kSatWidth; ++l) alive[l] = b.active[l];
  double any = 0.0;
  for (int l = 0; l < kSatWidth; ++l) any += alive[l];
  int axes = 0;
  for (int axis = 0; axis < 4 && any > 0.0; ++axis) {
    ++axes;
    any = 0.0;
#pragma omp simd reduction(+ : any)
    for (int l = 0; l < kSatWidth; ++l) {
      const bool own = axis < 2;
      const double c = own ? b.ec[l] : b.ac[l];
      const double s = own ? b.es[l] : b.as[l];
      const bool major = (axis & 1) == 0;
      const double ux = major ? c : -s;
      const double uy = major ? s : c;
      const bool sep = sat_separated(b.ax[l] - b.ex[l], b.ay[l] - b.ey[l], ux, uy, b.ec[l], b.es[l],
                                     b.ehl[l], b.ehw[l], b.ac[l], b.as[l], b.ahl[l], b.ahw[l]);
      alive[l] = sep ? 0.0 : alive[l];
      any += alive[l];
    }
  }
  for (int l = 0; l < kSatWidth; ++l) hit[l] = alive[l] != 0.0 ? 1 : 0;
  return axes;
}

std::vector<std::uint8_t> sat_overlap_batch(std::span<const Obb> ego, std::span<const Obb> agents,
                                            std::span<const std::uint8_t> active) {
  const std::size_t n = active.size();
  if (ego.size() != n || agents.size() != n) throw std::invalid_argument("SAT batch spans differ in size");
  if (n > static_cast<std::size_t>(kSatWidth)) throw std::invalid_argument("SAT batch wider than kSatWidth");
  SatLanes lanes;
  lanes.clear();
  for (std::size_t l = 0; l < n; ++l) {
    const auto li = static_cast<int>(l);
    double s, c;
    fmath::sin_cos(ego[l].heading, s, c);
    lanes.set_ego(li, ego[l].x, ego[l].y, c, s, ego[l].half_length, ego[l].half_width);
    fmath::sin_cos(agents[l].heading, s, c);
    lanes.set_agent(li, agents[l].x, agents[l].y, c, s, agents[l].half_length, agents[l].half_width);
    lanes.active[l] = active[l] ? 1.0 : 0.0;
  }
  std::uint8_t hit[kSatWidth];
  sat_kernel(lanes, hit);
  return std::vector<std::uint8_t>(hit, hit + n);
}

bool obb_overlap(const Obb& a, const Obb& b) {
  double as, ac, bs, bc;
  fmath::sin_cos(a.heading, as, ac);
  fmath::sin_cos(b.heading, bs, bc);
  const double dx = b.x - a.x;
  const double dy = b.y - a.y;
  const double axes[4][2] = {{ac, as}, {-as, ac}, {bc, bs}, {-bs, bc}};
  for (const auto& u : axes) {
    if (sat_separated(dx, dy, u[0], u[1], ac, as, a.half_length, a.half_width, bc, bs, b.half_length,
                      b.half_width)) {
      return false;
    }
  }
  return true;
}

}  // namespace vecqmdp
