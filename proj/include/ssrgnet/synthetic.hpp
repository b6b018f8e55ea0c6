#pragma once

// Small labelled proteins with Cα geometry for tests, demos and the
// overfit check. Not biologically meaningful.

#include <array>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "ssrgnet/protein.hpp"

namespace ssrgnet {

struct SyntheticOptions {
  std::size_t length = 50;
  double masked_fraction = 0.04;  // residues excluded from loss and metrics
  bool with_coords = true;
  double missing_coord_fraction = 0.0;
};

namespace detail {

// Residues favoured by each 8-state class, in kQ8Classes order (HECSTGBI).
inline const std::array<std::string, 8>& class_residues() {
  static const std::array<std::string, 8> r = {"AELM", "VIYF", "PND", "SQ", "TK", "RW", "CH", "G"};
  return r;
}

inline Vec3 axpy(Vec3 a, double s, Vec3 b) { return {a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]}; }

inline Vec3 unit(Vec3 v) {
  const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
  return {v[0] / n, v[1] / n, v[2] / n};
}

inline Vec3 cross3(Vec3 a, Vec3 b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

}  // namespace detail

/// Segments of H, E and C with occasional G/I/B/T/S residues. Helical
/// segments follow a 3.6-residue helix, strands an extended zigzag, coil a
/// persistent random walk; consecutive Cα sit roughly 3.8 Å apart.
inline ProteinRecord synthetic_protein(const std::string& id, std::uint64_t seed,
                                       const SyntheticOptions& opt = {}) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  ProteinRecord r;
  r.id = id;
  while (r.q8.size() < opt.length) {
    const double pick = u01(rng);
    const char seg = pick < 0.4 ? 'H' : (pick < 0.7 ? 'E' : 'C');
    const std::size_t len = seg == 'H' ? 6 + rng() % 7 : (seg == 'E' ? 4 + rng() % 4 : 2 + rng() % 5);
    for (std::size_t k = 0; k < len && r.q8.size() < opt.length; ++k) {
      char c = seg;
      const double alt = u01(rng);
      if (seg == 'H' && alt < 0.08) c = alt < 0.05 ? 'G' : 'I';
      if (seg == 'E' && alt < 0.06) c = 'B';
      if (seg == 'C' && alt < 0.4) c = alt < 0.2 ? 'T' : 'S';
      r.q8.push_back(c);
    }
  }
  for (char c : r.q8) {
    const std::string& pool = detail::class_residues()[label_index(Task::q8, c)];
    r.sequence.push_back(pool[rng() % pool.size()]);
  }
  r.q3 = q8_to_q3(r.q8);
  r.mask.assign(opt.length, true);
  for (std::size_t i = 0; i < opt.length; ++i)
    if (u01(rng) < opt.masked_fraction) r.mask[i] = false;

  if (!opt.with_coords) return r;

  using detail::axpy;
  auto noise = [&] { return Vec3{gauss(rng), gauss(rng), gauss(rng)}; };
  Vec3 pos{0.0, 0.0, 0.0};
  Vec3 dir = detail::unit(noise());
  std::size_t i = 0;
  while (i < opt.length) {
    const char seg = q8_to_q3(r.q8[i]);
    std::size_t end = i;
    while (end < opt.length && q8_to_q3(r.q8[end]) == seg) ++end;
    if (seg == 'H') {
      // Axis along `dir`; radius 2.3 Å, rise 1.5 Å, 100° per residue.
      const Vec3 perp = detail::unit(detail::cross3(dir, noise()));
      const Vec3 perp2 = detail::cross3(dir, perp);
      const Vec3 centre = axpy(pos, -2.3, perp);
      for (std::size_t k = 0; i < end; ++i, ++k) {
        const double a = static_cast<double>(k + 1) * 100.0 * std::numbers::pi / 180.0;
        pos = axpy(axpy(axpy(centre, 2.3 * std::cos(a), perp), 2.3 * std::sin(a), perp2),
                   1.5 * static_cast<double>(k + 1), dir);
        r.coords.emplace_back(pos);
      }
    } else if (seg == 'E') {
      const Vec3 side = detail::unit(detail::cross3(dir, noise()));
      for (std::size_t k = 0; i < end; ++i, ++k) {
        pos = axpy(axpy(pos, 3.3, dir), (k % 2 == 0) ? 1.6 : -1.6, side);
        r.coords.emplace_back(pos);
      }
    } else {
      for (; i < end; ++i) {
        dir = detail::unit(axpy(dir, 0.6, noise()));
        pos = axpy(pos, 3.8, dir);
        r.coords.emplace_back(pos);
      }
    }
    // Turn between segments so the chain folds back on itself.
    dir = detail::unit(axpy(Vec3{-dir[0], -dir[1], -dir[2]}, 0.8, noise()));
  }
  for (auto& c : r.coords)
    if (u01(rng) < opt.missing_coord_fraction) c.reset();
  return r;
}

inline std::vector<ProteinRecord> synthetic_set(std::size_t count, std::uint64_t seed,
                                                const SyntheticOptions& opt = {}) {
  std::vector<ProteinRecord> out;
  for (std::size_t i = 0; i < count; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "toy%02zu", i + 1);
    out.push_back(synthetic_protein(id, seed * 1000003ULL + i, opt));
  }
  return out;
}

}  // namespace ssrgnet
