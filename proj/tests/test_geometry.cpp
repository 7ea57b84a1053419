#include "test_util.hpp"
#include "tensornet/verification.hpp"

#include <gtest/gtest.h>

#include <set>
#include <tuple>

using namespace tensornet;

namespace {

AtomicSystem two_atoms(double d) {
  AtomicSystem s;
  s.atomic_numbers = {1, 1};
  s.positions = {{0, 0, 0}, {d, 0, 0}};
  return s;
}

AtomicSystem cloud(std::size_t n, std::uint64_t seed, double box) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, box);
  AtomicSystem s;
  for (std::size_t i = 0; i < n; ++i) {
    s.atomic_numbers.push_back(1);
    s.positions.push_back({u(rng), u(rng), u(rng)});
  }
  return s;
}

// Independent O(N^2) reference.
std::set<std::tuple<std::size_t, std::size_t>> reference_pairs(const AtomicSystem &s, double rc) {
  std::set<std::tuple<std::size_t, std::size_t>> out;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (i == j)
        continue;
      const double dx = s.positions[j][0] - s.positions[i][0], dy = s.positions[j][1] - s.positions[i][1],
                   dz = s.positions[j][2] - s.positions[i][2];
      if (std::sqrt(dx * dx + dy * dy + dz * dz) <= rc)
        out.insert({i, j});
    }
  return out;
}

std::set<std::tuple<std::size_t, std::size_t>> pairs_of(const EdgeSet &e) {
  std::set<std::tuple<std::size_t, std::size_t>> out;
  for (std::size_t k = 0; k < e.size(); ++k)
    out.insert({e.src[k], e.dst[k]});
  return out;
}

} // namespace

TEST(BuildEdges, TwoAtomsInside) {
  const EdgeSet e = build_edges(two_atoms(1.0), 4.5);
  ASSERT_EQ(e.size(), 2u);
  EXPECT_EQ(e.src[0], 0u);
  EXPECT_EQ(e.dst[0], 1u);
  EXPECT_EQ(e.src[1], 1u);
  EXPECT_EQ(e.dst[1], 0u);
  EXPECT_EQ(e.distances[0], 1.0);
  EXPECT_EQ(e.unit_vectors[0], (Vec3<double>{1, 0, 0}));
  EXPECT_EQ(e.unit_vectors[1], (Vec3<double>{-1, 0, 0}));
}

TEST(BuildEdges, TwoAtomsOutside) { EXPECT_TRUE(build_edges(two_atoms(5.0), 4.5).empty()); }

TEST(BuildEdges, MatchesBruteForceReference) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const AtomicSystem s = cloud(20, seed, 8.0);
    const EdgeSet e = build_edges(s, 4.5);
    EXPECT_EQ(pairs_of(e), reference_pairs(s, 4.5)) << "seed " << seed;
    for (std::size_t k = 1; k < e.size(); ++k)
      EXPECT_LT(std::make_pair(e.src[k - 1], e.dst[k - 1]), std::make_pair(e.src[k], e.dst[k]));
    for (const auto &u : e.unit_vectors)
      EXPECT_NEAR(std::hypot(u[0], u[1], u[2]), 1.0, 1e-12);
  }
}

TEST(BuildEdges, CellListAgreesWithBruteForce) {
  const AtomicSystem s = cloud(1500, 3, 30.0);
  const EdgeSet a = build_edges_brute_force(s, 4.5);
  const EdgeSet b = build_edges_cell_list(s, 4.5);
  ASSERT_EQ(a.size(), b.size());
  EXPECT_EQ(a.src, b.src);
  EXPECT_EQ(a.dst, b.dst);
  EXPECT_EQ(a.distances, b.distances);
  // Dispatcher picks the accelerator above the threshold; results identical.
  EXPECT_EQ(build_edges(s, 4.5).dst, a.dst);
}

TEST(BuildEdges, CoincidentAtomsRejected) {
  AtomicSystem s = two_atoms(1e-9);
  try {
    build_edges(s, 4.5);
    FAIL() << "expected an error";
  } catch (const Error &e) {
    EXPECT_NE(std::string(e.what()).find("atoms 0 and 1"), std::string::npos);
  }
}

TEST(BuildEdges, RejectsNonPositiveCutoff) { EXPECT_THROW(build_edges(two_atoms(1.0), 0.0), Error); }

TEST(BuildEdges, TranslationAndRotation) {
  const AtomicSystem s = cloud(30, 11, 6.0);
  const EdgeSet e0 = build_edges(s, 3.0);
  const auto g = random_rotation(9);
  AtomicSystem moved = s;
  for (auto &p : moved.positions) {
    p = g.apply(p);
    p[0] += 3.5;
    p[1] -= 1.25;
  }
  const EdgeSet e1 = build_edges(moved, 3.0);
  ASSERT_EQ(pairs_of(e0), pairs_of(e1));
  for (std::size_t k = 0; k < e0.size(); ++k) {
    EXPECT_NEAR(e0.distances[k], e1.distances[k], 1e-12);
    const auto r = g.apply(e0.unit_vectors[k]);
    for (int i = 0; i < 3; ++i)
      EXPECT_NEAR(r[i], e1.unit_vectors[k][i], 1e-12);
  }
}

TEST(RadialBasis, PublishedConstants) {
  const RadialBasis b = RadialBasis::make(8, 5.0);
  EXPECT_EQ(b.mu.front(), std::exp(-5.0));
  EXPECT_NEAR(b.mu.front(), 0.006738, 5e-7);
  EXPECT_EQ(b.mu.back(), 1.0);
  const double beta = std::pow(2.0 / 8.0 * (1.0 - std::exp(-5.0)), -2.0);
  for (double x : b.beta)
    EXPECT_NEAR(x, beta, 1e-12 * beta);
  EXPECT_NEAR(beta, 16.2178, 1e-4);
  for (std::size_t k = 1; k < b.mu.size(); ++k)
    EXPECT_GT(b.mu[k], b.mu[k - 1]);
}

TEST(RadialBasis, PeakAtCentre) {
  const RadialBasis b = RadialBasis::make(16, 4.5);
  for (std::size_t k = 0; k < b.size; ++k) {
    const double r = -std::log(b.mu[k]);
    EXPECT_NEAR(rbf_expand(r, b)[k], 1.0, 1e-15);
  }
}

TEST(RadialBasis, LargeDistanceLimit) {
  const RadialBasis b = RadialBasis::make(8, 5.0);
  const auto e = rbf_expand(200.0, b);
  for (std::size_t k = 0; k < b.size; ++k)
    EXPECT_NEAR(e[k], std::exp(-b.beta[k] * b.mu[k] * b.mu[k]), 1e-15);
}

TEST(RadialBasis, RejectsBadArguments) {
  EXPECT_THROW(RadialBasis::make(0, 4.5), Error);
  EXPECT_THROW(RadialBasis::make(8, -1.0), Error);
}

TEST(CutoffFn, Values) {
  EXPECT_EQ(cutoff_fn(0.0, 4.5), 1.0);
  EXPECT_NEAR(cutoff_fn(4.5, 4.5), 0.0, 1e-16);
  EXPECT_NEAR(cutoff_fn(2.25, 4.5), 0.5, 1e-15);
  EXPECT_EQ(cutoff_fn(4.6, 4.5), 0.0);
}

TEST(CutoffFn, SmoothAtCutoff) {
  const double rc = 4.5, h = 1e-4;
  // Second-order backward difference from below.
  const double d = (3 * cutoff_fn(rc, rc) - 4 * cutoff_fn(rc - h, rc) + cutoff_fn(rc - 2 * h, rc)) / (2 * h);
  EXPECT_LE(std::abs(d), 1e-6);
  const Dual<double> x{rc, 1.0};
  EXPECT_LE(std::abs(cutoff_fn(x, rc).d), 1e-12);
}

TEST(AtomicSystem, Validation) {
  AtomicSystem s;
  EXPECT_THROW(s.validate(), Error);
  s = two_atoms(1.0);
  s.validate();
  s.positions[1][2] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(s.validate(), Error);
  s = two_atoms(1.0);
  s.forces = std::vector<Vec3<double>>{{0, 0, 0}};
  EXPECT_THROW(s.validate(), Error);
  s = two_atoms(1.0);
  s.polarizability = Mat3<double>{1, 2, 0, 0, 1, 0, 0, 0, 1};
  EXPECT_THROW(s.validate(), Error);
  s = two_atoms(1.0);
  s.atomic_numbers[0] = 0;
  EXPECT_THROW(s.validate(), Error);
}
