#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace vecqmdp {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

/// Polyline reference path. Also defines a Frenet frame: s is arc length,
/// d is the signed lateral offset (left of travel direction positive).
class ReferencePath {
 public:
  ReferencePath() = default;
  /// Throws std::invalid_argument for fewer than two vertices or repeated
  /// consecutive vertices (arc length must be strictly increasing).
  explicit ReferencePath(std::vector<Vec2> vertices);

  /// Straight path from `start` along `heading` with the given length.
  static ReferencePath straight(Vec2 start, double heading, double length);

  std::size_t vertex_count() const { return xs_.size(); }
  std::size_t segment_count() const { return seg_len_.size(); }
  Vec2 vertex(std::size_t i) const { return {xs_[i], ys_[i]}; }
  double arc_length(std::size_t i) const { return s_[i]; }
  double length() const { return s_.back(); }
  /// Unit tangent heading at vertex i (average of adjacent segment directions).
  double tangent_heading(std::size_t i) const { return vertex_heading_[i]; }
  double segment_heading(std::size_t i) const { return seg_heading_[i]; }
  double segment_cos(std::size_t i) const { return seg_cos_[i]; }
  double segment_sin(std::size_t i) const { return seg_sin_[i]; }
  double segment_length(std::size_t i) const { return seg_len_[i]; }

  /// Point at arc length s (clamped to [0, length()]).
  Vec2 point_at(double s) const;
  /// Segment containing arc length s (clamped).
  std::size_t segment_at(double s) const;

 private:
  std::vector<double> xs_, ys_, s_;
  std::vector<double> seg_len_, seg_cos_, seg_sin_, seg_heading_;
  std::vector<double> vertex_heading_;
};

struct FrenetPoint {
  double s = 0.0;
  double d = 0.0;
  /// Heading of the path segment holding the foot point.
  double path_heading = 0.0;
  std::size_t segment = 0;
  /// True when the point projects beyond either path end; s is clamped and
  /// d is measured in the endpoint frame.
  bool clamped = false;
};

/// Nearest-point projection onto the polyline. Ties go to the lower segment.
FrenetPoint frenet_project(Vec2 p, const ReferencePath& path);

/// Inverse map: point at arc length s displaced by d along the left normal
/// of the segment containing s.
Vec2 frenet_to_cartesian(double s, double d, const ReferencePath& path);

}  // namespace vecqmdp
