#pragma once

// Molecular graph construction and radial featurization.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "tensornet/error.hpp"
#include "tensornet/tensor_algebra.hpp"

namespace tensornet {

struct AtomicSystem {
  std::vector<int> atomic_numbers;
  std::vector<Vec3<double>> positions; // Angstrom

  std::optional<double> energy;
  std::optional<std::vector<Vec3<double>>> forces;
  std::optional<Vec3<double>> dipole;
  std::optional<Mat3<double>> polarizability;
  std::optional<std::vector<Mat3<double>>> shieldings;

  std::size_t size() const noexcept { return atomic_numbers.size(); }

  void validate() const {
    if (atomic_numbers.empty())
      throw Error("AtomicSystem: no atoms");
    if (positions.size() != atomic_numbers.size())
      throw Error("AtomicSystem: " + std::to_string(positions.size()) + " positions for " +
                  std::to_string(atomic_numbers.size()) + " atoms");
    for (std::size_t i = 0; i < size(); ++i) {
      if (atomic_numbers[i] <= 0)
        throw Error("AtomicSystem: atom " + std::to_string(i) + " has non-positive atomic number");
      for (double x : positions[i])
        if (!std::isfinite(x))
          throw Error("AtomicSystem: atom " + std::to_string(i) + " has non-finite position");
    }
    if (forces && forces->size() != size())
      throw Error("AtomicSystem: force label has " + std::to_string(forces->size()) +
                  " rows for " + std::to_string(size()) + " atoms");
    if (shieldings && shieldings->size() != size())
      throw Error("AtomicSystem: shielding label has " + std::to_string(shieldings->size()) +
                  " entries for " + std::to_string(size()) + " atoms");
    if (polarizability) {
      const auto &p = *polarizability;
      for (int i = 0; i < 3; ++i)
        for (int j = i + 1; j < 3; ++j)
          if (std::abs(p[3 * i + j] - p[3 * j + i]) > 1e-8)
            throw Error("AtomicSystem: polarizability label is not symmetric");
    }
  }
};

// Directed neighbor pairs, sorted by (i, j). unit_vectors[e] points from
// atom src[e] to atom dst[e].
struct EdgeSet {
  std::vector<std::size_t> src;
  std::vector<std::size_t> dst;
  std::vector<double> distances;
  std::vector<Vec3<double>> unit_vectors;

  std::size_t size() const noexcept { return src.size(); }
  bool empty() const noexcept { return src.empty(); }
};

inline constexpr double coincident_threshold = 1e-8;

namespace detail {

inline void push_edge(EdgeSet &edges, const std::vector<Vec3<double>> &pos, std::size_t i,
                      std::size_t j, double r) {
  const Vec3<double> d{pos[j][0] - pos[i][0], pos[j][1] - pos[i][1], pos[j][2] - pos[i][2]};
  edges.src.push_back(i);
  edges.dst.push_back(j);
  edges.distances.push_back(r);
  edges.unit_vectors.push_back({d[0] / r, d[1] / r, d[2] / r});
}

inline double distance(const Vec3<double> &a, const Vec3<double> &b) {
  const double dx = b[0] - a[0], dy = b[1] - a[1], dz = b[2] - a[2];
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

[[noreturn]] inline void throw_coincident(std::size_t i, std::size_t j, double r) {
  throw Error("build_edges: atoms " + std::to_string(i) + " and " + std::to_string(j) +
              " are coincident (r = " + std::to_string(r) + " A)");
}

} // namespace detail

// O(N^2) reference neighbor search.
inline EdgeSet build_edges_brute_force(const AtomicSystem &system, double cutoff) {
  if (!(cutoff > 0))
    throw Error("build_edges: cutoff must be positive");
  const auto &pos = system.positions;
  const std::size_t n = pos.size();
  EdgeSet edges;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j)
        continue;
      const double r = detail::distance(pos[i], pos[j]);
      if (r < coincident_threshold)
        detail::throw_coincident(std::min(i, j), std::max(i, j), r);
      if (r <= cutoff)
        detail::push_edge(edges, pos, i, j, r);
    }
  return edges;
}

// Uniform cell grid with cell edge >= cutoff; only the 27 surrounding cells are
// scanned. Produces the same set and ordering as the brute-force search.
inline EdgeSet build_edges_cell_list(const AtomicSystem &system, double cutoff) {
  if (!(cutoff > 0))
    throw Error("build_edges: cutoff must be positive");
  const auto &pos = system.positions;
  const std::size_t n = pos.size();
  EdgeSet edges;
  if (n == 0)
    return edges;

  Vec3<double> lo = pos[0], hi = pos[0];
  for (const auto &p : pos)
    for (int k = 0; k < 3; ++k) {
      lo[k] = std::min(lo[k], p[k]);
      hi[k] = std::max(hi[k], p[k]);
    }
  std::array<std::int64_t, 3> dims{};
  for (int k = 0; k < 3; ++k)
    dims[k] = std::max<std::int64_t>(1, static_cast<std::int64_t>((hi[k] - lo[k]) / cutoff) + 1);

  auto cell_of = [&](const Vec3<double> &p) {
    std::array<std::int64_t, 3> c{};
    for (int k = 0; k < 3; ++k)
      c[k] = std::min<std::int64_t>(dims[k] - 1, static_cast<std::int64_t>((p[k] - lo[k]) / cutoff));
    return c;
  };
  auto flat = [&](const std::array<std::int64_t, 3> &c) {
    return (c[0] * dims[1] + c[1]) * dims[2] + c[2];
  };

  std::unordered_map<std::int64_t, std::vector<std::size_t>> cells;
  for (std::size_t i = 0; i < n; ++i)
    cells[flat(cell_of(pos[i]))].push_back(i);

  std::vector<std::size_t> neighbors;
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = cell_of(pos[i]);
    neighbors.clear();
    for (std::int64_t dx = -1; dx <= 1; ++dx)
      for (std::int64_t dy = -1; dy <= 1; ++dy)
        for (std::int64_t dz = -1; dz <= 1; ++dz) {
          const std::array<std::int64_t, 3> nc{c[0] + dx, c[1] + dy, c[2] + dz};
          if (nc[0] < 0 || nc[1] < 0 || nc[2] < 0 || nc[0] >= dims[0] || nc[1] >= dims[1] ||
              nc[2] >= dims[2])
            continue;
          auto it = cells.find(flat(nc));
          if (it != cells.end())
            neighbors.insert(neighbors.end(), it->second.begin(), it->second.end());
        }
    std::sort(neighbors.begin(), neighbors.end());
    for (std::size_t j : neighbors) {
      if (j == i)
        continue;
      const double r = detail::distance(pos[i], pos[j]);
      if (r < coincident_threshold)
        detail::throw_coincident(std::min(i, j), std::max(i, j), r);
      if (r <= cutoff)
        detail::push_edge(edges, pos, i, j, r);
    }
  }
  return edges;
}

inline constexpr std::size_t cell_list_threshold = 1000;

inline EdgeSet build_edges(const AtomicSystem &system, double cutoff) {
  return system.size() > cell_list_threshold ? build_edges_cell_list(system, cutoff)
                                             : build_edges_brute_force(system, cutoff);
}

// Exponential radial basis exp(-beta_k (exp(-r) - mu_k)^2).
struct RadialBasis {
  std::size_t size = 0;
  double cutoff = 0;
  std::vector<double> mu;
  std::vector<double> beta;

  // Centers equally spaced on [exp(-r_c), 1] (both endpoints included), shared
  // width (2/d (1 - exp(-r_c)))^-2.
  static RadialBasis make(std::size_t d, double cutoff) {
    if (d == 0 || !(cutoff > 0))
      throw Error("RadialBasis: need d > 0 and cutoff > 0");
    RadialBasis b;
    b.size = d;
    b.cutoff = cutoff;
    const double start = std::exp(-cutoff);
    b.mu.resize(d);
    if (d == 1) {
      b.mu[0] = start;
    } else {
      const double step = (1.0 - start) / static_cast<double>(d - 1);
      for (std::size_t k = 0; k < d; ++k)
        b.mu[k] = start + step * static_cast<double>(k);
      b.mu[d - 1] = 1.0;
    }
    const double w = 2.0 / static_cast<double>(d) * (1.0 - start);
    b.beta.assign(d, 1.0 / (w * w));
    return b;
  }
};

template <class T> std::vector<T> rbf_expand(T r, const RadialBasis &basis) {
  using std::exp;
  std::vector<T> e(basis.size);
  const T x = exp(-r);
  for (std::size_t k = 0; k < basis.size; ++k) {
    const T d = x - T(basis.mu[k]);
    e[k] = exp(-T(basis.beta[k]) * d * d);
  }
  return e;
}

// Cosine envelope 1/2 (cos(pi r / r_c) + 1) inside the cutoff, 0 outside.
template <class T> T cutoff_fn(T r, double cutoff) {
  using std::cos;
  if (r > T(cutoff))
    return T(0);
  return T(0.5) * (cos(T(std::numbers::pi / cutoff) * r) + T(1));
}

} // namespace tensornet
