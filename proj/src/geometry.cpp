#include "vecqmdp/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "vecqmdp/math.hpp"

namespace vecqmdp {

ReferencePath::ReferencePath(std::vector<Vec2> vertices) {
  if (vertices.size() < 2) {
    throw std::invalid_argument("reference path needs at least two vertices");
  }
  const std::size_t n = vertices.size();
  xs_.reserve(n);
  ys_.reserve(n);
  s_.reserve(n);
  for (const Vec2& v : vertices) {
    xs_.push_back(v.x);
    ys_.push_back(v.y);
  }
  s_.push_back(0.0);
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const double dx = xs_[i + 1] - xs_[i];
    const double dy = ys_[i + 1] - ys_[i];
    const double len = std::hypot(dx, dy);
    if (!(len > 0.0)) {
      throw std::invalid_argument("reference path has a zero-length segment");
    }
    seg_len_.push_back(len);
    seg_cos_.push_back(dx / len);
    seg_sin_.push_back(dy / len);
    seg_heading_.push_back(std::atan2(dy, dx));
    s_.push_back(s_.back() + len);
  }
  vertex_heading_.resize(n);
  vertex_heading_.front() = seg_heading_.front();
  vertex_heading_.back() = seg_heading_.back();
  for (std::size_t i = 1; i + 1 < n; ++i) {
    const double cx = seg_cos_[i - 1] + seg_cos_[i];
    const double cy = seg_sin_[i - 1] + seg_sin_[i];
    vertex_heading_[i] = std::atan2(cy, cx);
  }
}

ReferencePath ReferencePath::straight(Vec2 start, double heading, double length) {
  return ReferencePath({start,
                        {start.x + length * std::cos(heading), start.y + length * std::sin(heading)}});
}

std::size_t ReferencePath::segment_at(double s) const {
  const auto it = std::upper_bound(s_.begin(), s_.end(), s);
  if (it == s_.begin()) return 0;
  const auto idx = static_cast<std::size_t>(std::distance(s_.begin(), it)) - 1;
  return std::min(idx, segment_count() - 1);
}

Vec2 ReferencePath::point_at(double s) const {
  s = std::clamp(s, 0.0, length());
  const std::size_t i = segment_at(s);
  const double t = s - s_[i];
  return {xs_[i] + t * seg_cos_[i], ys_[i] + t * seg_sin_[i]};
}

FrenetPoint frenet_project(Vec2 p, const ReferencePath& path) {
  const std::size_t nseg = path.segment_count();
  double best_dist2 = std::numeric_limits<double>::infinity();
  std::size_t best = 0;
  double best_t = 0.0;
  double best_raw_t = 0.0;
  for (std::size_t i = 0; i < nseg; ++i) {
    const Vec2 a = path.vertex(i);
    const double rx = p.x - a.x;
    const double ry = p.y - a.y;
    const double raw_t = rx * path.segment_cos(i) + ry * path.segment_sin(i);
    const double t = std::clamp(raw_t, 0.0, path.segment_length(i));
    const double fx = rx - t * path.segment_cos(i);
    const double fy = ry - t * path.segment_sin(i);
    const double dist2 = fx * fx + fy * fy;
    if (dist2 < best_dist2) {
      best_dist2 = dist2;
      best = i;
      best_t = t;
      best_raw_t = raw_t;
    }
  }

  FrenetPoint out;
  out.segment = best;
  out.path_heading = path.segment_heading(best);
  out.s = path.arc_length(best) + best_t;
  const Vec2 a = path.vertex(best);
  const double rx = p.x - a.x;
  const double ry = p.y - a.y;
  const double cross = path.segment_cos(best) * ry - path.segment_sin(best) * rx;
  const bool before_start = best == 0 && best_raw_t < 0.0;
  const bool past_end = best == nseg - 1 && best_raw_t > path.segment_length(best);
  out.clamped = before_start || past_end;
  const bool interior = best_t > 0.0 && best_t < path.segment_length(best);
  if (interior || out.clamped) {
    out.d = cross;
  } else {
    // Foot on an interior vertex: distance to the vertex, side from the segment.
    out.d = std::copysign(std::sqrt(best_dist2), cross);
  }
  return out;
}

Vec2 frenet_to_cartesian(double s, double d, const ReferencePath& path) {
  const std::size_t i = path.segment_at(std::clamp(s, 0.0, path.length()));
  const Vec2 a = path.vertex(i);
  const double t = s - path.arc_length(i);
  const double c = path.segment_cos(i);
  const double sn = path.segment_sin(i);
  return {a.x + t * c - d * sn, a.y + t * sn + d * c};
}

}  // namespace vecqmdp
