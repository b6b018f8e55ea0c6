#pragma once

// Uniform hash grid over 3-D points for radius and k-nearest queries.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ssrgnet/protein.hpp"

namespace ssrgnet {

inline double squared_distance(const Vec3& a, const Vec3& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

class SpatialGrid {
 public:
  struct Neighbor {
    double dist2;
    std::size_t index;
    friend bool operator<(const Neighbor& a, const Neighbor& b) {
      return a.dist2 < b.dist2 || (a.dist2 == b.dist2 && a.index < b.index);
    }
  };

  /// `ids[k]` is the caller's index for `points[k]`.
  SpatialGrid(std::vector<Vec3> points, std::vector<std::size_t> ids, double cell)
      : points_(std::move(points)), ids_(std::move(ids)), cell_(cell * (1.0 + 1e-9)) {
    for (std::size_t k = 0; k < points_.size(); ++k) {
      const Cell c = cell_of(points_[k]);
      cells_[c].push_back(k);
      if (k == 0) lo_ = hi_ = c;
      lo_ = {std::min(lo_.x, c.x), std::min(lo_.y, c.y), std::min(lo_.z, c.z)};
      hi_ = {std::max(hi_.x, c.x), std::max(hi_.y, c.y), std::max(hi_.z, c.z)};
    }
  }

  std::size_t size() const noexcept { return points_.size(); }

  /// Caller ids of points strictly closer than `radius` to point k, excluding k.
  /// Requires radius <= cell size.
  std::vector<std::size_t> within(std::size_t k, double radius) const {
    std::vector<std::size_t> out;
    const Vec3& p = points_[k];
    const Cell home = cell_of(p);
    const double r2 = radius * radius;
    for (std::int64_t dx = -1; dx <= 1; ++dx)
      for (std::int64_t dy = -1; dy <= 1; ++dy)
        for (std::int64_t dz = -1; dz <= 1; ++dz) {
          auto it = cells_.find(Cell{home.x + dx, home.y + dy, home.z + dz});
          if (it == cells_.end()) continue;
          for (std::size_t j : it->second)
            if (j != k && squared_distance(p, points_[j]) < r2) out.push_back(ids_[j]);
        }
    std::sort(out.begin(), out.end());
    return out;
  }

  /// The k nearest other points of point `self`, ordered by (distance, id).
  /// `accept(id)` filters candidates before ranking.
  template <class Accept>
  std::vector<Neighbor> nearest(std::size_t self, std::size_t k, Accept accept) const {
    std::vector<Neighbor> found;
    if (k == 0) return found;
    const Vec3& p = points_[self];
    const Cell home = cell_of(p);
    const std::int64_t reach = std::max({home.x - lo_.x, hi_.x - home.x, home.y - lo_.y,
                                         hi_.y - home.y, home.z - lo_.z, hi_.z - home.z});
    const double span = static_cast<double>(2 * reach + 1);
    if (span * span * span > 27.0 * static_cast<double>(points_.size() + 1)) {
      // Sparse grid relative to the point count: a plain scan is cheaper.
      for (std::size_t j = 0; j < points_.size(); ++j)
        if (j != self && accept(ids_[j])) found.push_back({squared_distance(p, points_[j]), ids_[j]});
      std::sort(found.begin(), found.end());
      if (found.size() > k) found.resize(k);
      return found;
    }
    std::size_t visited = 1;
    for (std::int64_t s = 0;; ++s) {
      for (std::int64_t dx = -s; dx <= s; ++dx)
        for (std::int64_t dy = -s; dy <= s; ++dy)
          for (std::int64_t dz = -s; dz <= s; ++dz) {
            if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != s) continue;
            auto it = cells_.find(Cell{home.x + dx, home.y + dy, home.z + dz});
            if (it == cells_.end()) continue;
            for (std::size_t j : it->second) {
              if (j == self) continue;
              ++visited;
              if (accept(ids_[j])) found.push_back({squared_distance(p, points_[j]), ids_[j]});
            }
          }
      if (visited >= points_.size()) break;
      // Every unvisited point is farther than s cells from p.
      if (found.size() >= k) {
        std::nth_element(found.begin(), found.begin() + static_cast<std::ptrdiff_t>(k - 1), found.end());
        const double bound = static_cast<double>(s) * cell_ * (1.0 - 1e-9);
        if (found[k - 1].dist2 < bound * bound) break;
      }
    }
    std::sort(found.begin(), found.end());
    if (found.size() > k) found.resize(k);
    return found;
  }

 private:
  struct Cell {
    std::int64_t x, y, z;
    friend bool operator==(const Cell&, const Cell&) = default;
  };
  struct CellHash {
    std::size_t operator()(const Cell& c) const noexcept {
      std::uint64_t h = static_cast<std::uint64_t>(c.x) * 0x9e3779b97f4a7c15ull;
      h ^= static_cast<std::uint64_t>(c.y) * 0xc2b2ae3d27d4eb4full + (h << 6) + (h >> 2);
      h ^= static_cast<std::uint64_t>(c.z) * 0x165667b19e3779f9ull + (h << 6) + (h >> 2);
      return static_cast<std::size_t>(h);
    }
  };

  Cell cell_of(const Vec3& p) const {
    return Cell{static_cast<std::int64_t>(std::floor(p[0] / cell_)),
                static_cast<std::int64_t>(std::floor(p[1] / cell_)),
                static_cast<std::int64_t>(std::floor(p[2] / cell_))};
  }

  std::vector<Vec3> points_;
  std::vector<std::size_t> ids_;
  double cell_;
  Cell lo_{0, 0, 0}, hi_{0, 0, 0};
  std::unordered_map<Cell, std::vector<std::size_t>, CellHash> cells_;
};

}  // namespace ssrgnet
