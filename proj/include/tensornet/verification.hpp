#pragma once

// Symmetry fuzzing, finite-difference force checks and the tensor-product
// identity oracles.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tensornet/geometry.hpp"
#include "tensornet/model.hpp"
#include "tensornet/tensor_algebra.hpp"

namespace tensornet {

// Haar-uniform rotation from a uniformly sampled unit quaternion.
inline GroupElement<double> random_rotation(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  double q[4];
  double n = 0;
  do {
    n = 0;
    for (double &x : q) {
      x = nd(rng);
      n += x * x;
    }
  } while (n < 1e-12);
  n = std::sqrt(n);
  const double w = q[0] / n, x = q[1] / n, y = q[2] / n, z = q[3] / n;
  const Mat3<double> r{1 - 2 * (y * y + z * z), 2 * (x * y - z * w),     2 * (x * z + y * w),
                       2 * (x * y + z * w),     1 - 2 * (x * x + z * z), 2 * (y * z - x * w),
                       2 * (x * z - y * w),     2 * (y * z + x * w),     1 - 2 * (x * x + y * y)};
  return GroupElement<double>::from_matrix(r);
}

// Random atoms in a cube sized for roughly liquid density, no pair closer
// than min_dist.
inline AtomicSystem random_system(std::size_t n_atoms, std::uint64_t seed, std::vector<int> elements = {1, 6, 8},
                                  double min_dist = 0.9) {
  std::mt19937_64 rng(seed);
  const double side = std::cbrt(static_cast<double>(n_atoms) * 10.0);
  std::uniform_real_distribution<double> u(0.0, side);
  std::uniform_int_distribution<std::size_t> pick(0, elements.size() - 1);
  AtomicSystem s;
  while (s.size() < n_atoms) {
    const Vec3<double> p{u(rng), u(rng), u(rng)};
    bool ok = true;
    for (const auto &q : s.positions) {
      const double d = std::hypot(p[0] - q[0], p[1] - q[1], p[2] - q[2]);
      ok = ok && d >= min_dist;
    }
    if (!ok)
      continue;
    s.positions.push_back(p);
    s.atomic_numbers.push_back(elements[pick(rng)]);
  }
  return s;
}

// Five distinct elements in an asymmetric arrangement: no improper O(3)
// element maps it onto itself.
inline AtomicSystem chiral_fixture() {
  AtomicSystem s;
  s.atomic_numbers = {6, 1, 9, 17, 35};
  s.positions = {{-0.130, -1.279, 0.256},
                 {0.313, -0.471, -0.316},
                 {-0.922, -0.250, -0.066},
                 {-0.510, 1.054, 0.090},
                 {-0.412, 0.125, 0.978}};
  return s;
}

// Smallest RMS displacement sum_i |g d_i - d_i|^2 / n over improper g and
// translations, where d_i are centred coordinates and every atom must map to
// itself. Equals sqrt(4 lambda_min / n) for the gyration matrix sum d d^T.
inline double improper_self_match_residual(const AtomicSystem &s) {
  const std::size_t n = s.size();
  Vec3<double> c{0, 0, 0};
  for (const auto &p : s.positions)
    for (int k = 0; k < 3; ++k)
      c[k] += p[k] / static_cast<double>(n);
  Mat3<double> h{};
  for (const auto &p : s.positions)
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b)
        h[3 * a + b] += (p[a] - c[a]) * (p[b] - c[b]);
  // Smallest eigenvalue of a symmetric 3x3 matrix, trigonometric form.
  const double q = mat3::trace(h) / 3.0;
  const double p1 = h[1] * h[1] + h[2] * h[2] + h[5] * h[5];
  double lmin = q;
  if (p1 > 0) {
    const double p2 = (h[0] - q) * (h[0] - q) + (h[4] - q) * (h[4] - q) + (h[8] - q) * (h[8] - q) + 2 * p1;
    const double p = std::sqrt(p2 / 6.0);
    Mat3<double> b = h;
    b[0] -= q;
    b[4] -= q;
    b[8] -= q;
    const double r = std::clamp(mat3::det(mat3::scale(b, 1.0 / p)) / 2.0, -1.0, 1.0);
    const double phi = std::acos(r) / 3.0;
    lmin = q + 2 * p * std::cos(phi + 2.0 * std::numbers::pi / 3.0);
  } else {
    lmin = std::min({h[0], h[4], h[8]});
  }
  return std::sqrt(std::max(0.0, 4.0 * lmin / static_cast<double>(n)));
}

// ---------------------------------------------------------------------------
// Equivariance
// ---------------------------------------------------------------------------

struct SymmetryTolerances {
  double energy = 1e-9; // relative
  double vector = 1e-9; // relative to the largest reference component
  double tensor = 1e-9;
};

struct HeadDeviation {
  std::string transform;
  std::string head;
  std::size_t samples = 0;
  double max_abs = 0;
  double mean_abs = 0;
  double max_rel = 0;
  double mean_rel = 0;
  double tolerance = 0;

  bool pass() const { return max_rel <= tolerance; }
};

namespace detail {
inline std::string format_g(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}
} // namespace detail

struct SymmetryReport {
  std::size_t trials = 0;
  std::vector<HeadDeviation> rows;

  bool pass() const {
    return std::all_of(rows.begin(), rows.end(), [](const HeadDeviation &r) { return r.pass(); });
  }

  // Row with the largest deviation relative to its tolerance.
  const HeadDeviation *worst() const {
    const HeadDeviation *w = nullptr;
    double best = -1;
    for (const auto &r : rows) {
      const double score = r.tolerance > 0 ? r.max_rel / r.tolerance : r.max_rel;
      if (score > best) {
        best = score;
        w = &r;
      }
    }
    return w;
  }

  std::string table() const {
    std::ostringstream os;
    os << std::left << std::setw(22) << "transform" << std::setw(16) << "head" << std::setw(14) << "max_abs"
       << std::setw(14) << "mean_abs" << std::setw(14) << "max_rel" << std::setw(14) << "tolerance"
       << "status\n";
    for (const auto &r : rows)
      os << std::left << std::setw(22) << r.transform << std::setw(16) << r.head << std::setw(14)
         << detail::format_g(r.max_abs) << std::setw(14) << detail::format_g(r.mean_abs) << std::setw(14)
         << detail::format_g(r.max_rel) << std::setw(14) << detail::format_g(r.tolerance)
         << (r.pass() ? "pass" : "FAIL") << "\n";
    return os.str();
  }

  std::string result_line() const {
    const HeadDeviation *w = worst();
    std::ostringstream os;
    os << "RESULT " << (pass() ? "pass" : "fail") << " max_dev=" << std::setprecision(6)
       << (w ? w->max_rel : 0.0) << " transform=" << (w ? w->transform : "none")
       << " head=" << (w ? w->head : "none");
    return os.str();
  }
};

struct EquivarianceOptions {
  std::size_t n_trials = 50;
  std::uint64_t seed = 0;
  bool rotations = true;   // transform "rotation"
  bool parity = true;      // transform "rotation+parity"
  bool translation = true; // composes a random translation with each
  SymmetryTolerances tolerances;
  HeadSet heads{true, true, true, true};
};

namespace detail {

// Accumulates |got - want| for one head over trials.
struct DevAccumulator {
  HeadDeviation row;
  double sum_abs = 0, sum_rel = 0;

  void add(std::span<const double> got, std::span<const double> want) {
    double dev = 0, scale = 0;
    for (std::size_t k = 0; k < got.size(); ++k) {
      dev = std::max(dev, std::abs(got[k] - want[k]));
      scale = std::max(scale, std::abs(want[k]));
    }
    const double rel = dev == 0 ? 0 : dev / std::max(scale, 1e-300);
    row.samples += 1;
    row.max_abs = std::max(row.max_abs, dev);
    row.max_rel = std::max(row.max_rel, rel);
    sum_abs += dev;
    sum_rel += rel;
    row.mean_abs = sum_abs / static_cast<double>(row.samples);
    row.mean_rel = sum_rel / static_cast<double>(row.samples);
  }
};

inline Mat3<double> conj(const Mat3<double> &g, const Mat3<double> &m) {
  return mat3::mul(mat3::mul(g, m), mat3::transpose(g));
}

} // namespace detail

struct TransformDeviation {
  double energy = 0, forces = 0, dipole = 0, polarizability = 0, shielding = 0;
};

// Predictions on g x + t compared with the transformation laws applied to the
// predictions on x: energy invariant, forces and dipole g-covariant,
// polarizability and shielding conjugated.
template <class T = double>
std::vector<std::pair<std::string, std::pair<std::vector<double>, std::vector<double>>>>
transformed_outputs(const ModelConfig &cfg, const ParamStore &params, const AtomicSystem &system,
                    const GroupElement<double> &g, const Vec3<double> &t, const HeadSet &heads) {
  PredictOptions po;
  po.heads = heads;
  po.forces = heads.energy;
  const SystemPrediction ref = predict<T>(system, params, cfg, po);
  AtomicSystem moved = system;
  for (auto &p : moved.positions) {
    p = g.apply(p);
    for (int k = 0; k < 3; ++k)
      p[k] += t[k];
  }
  const SystemPrediction got = predict<T>(moved, params, cfg, po);
  const Mat3<double> &m = g.matrix();
  std::vector<std::pair<std::string, std::pair<std::vector<double>, std::vector<double>>>> out;
  if (heads.energy && cfg.heads.energy) {
    out.push_back({"energy", {{got.energy}, {ref.energy}}});
    std::vector<double> a, b;
    for (std::size_t i = 0; i < system.size(); ++i) {
      const auto w = mat3::apply(m, ref.forces[i]);
      a.insert(a.end(), got.forces[i].begin(), got.forces[i].end());
      b.insert(b.end(), w.begin(), w.end());
    }
    out.push_back({"forces", {a, b}});
  }
  if (ref.dipole && got.dipole) {
    const auto w = mat3::apply(m, *ref.dipole);
    out.push_back({"dipole", {{got.dipole->begin(), got.dipole->end()}, {w.begin(), w.end()}}});
  }
  if (ref.polarizability && got.polarizability) {
    const auto w = detail::conj(m, *ref.polarizability);
    out.push_back({"polarizability",
                   {{got.polarizability->begin(), got.polarizability->end()}, {w.begin(), w.end()}}});
  }
  if (ref.shieldings && got.shieldings) {
    std::vector<double> a, b;
    for (std::size_t i = 0; i < system.size(); ++i) {
      const auto w = detail::conj(m, (*ref.shieldings)[i]);
      a.insert(a.end(), (*got.shieldings)[i].begin(), (*got.shieldings)[i].end());
      b.insert(b.end(), w.begin(), w.end());
    }
    out.push_back({"shielding", {a, b}});
  }
  return out;
}

template <class T = double>
SymmetryReport equivariance_report(const ModelConfig &cfg, const ParamStore &params, const AtomicSystem &system,
                                   const EquivarianceOptions &opt = {}) {
  const double ps = precision_scale<T>;
  SymmetryReport rep;
  rep.trials = opt.n_trials;
  std::vector<std::string> transforms;
  if (opt.rotations)
    transforms.push_back("rotation");
  if (opt.parity)
    transforms.push_back("rotation+parity");
  std::map<std::pair<std::string, std::string>, detail::DevAccumulator> acc;
  std::vector<std::pair<std::string, std::string>> order;
  std::mt19937_64 rng(opt.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> ut(-5.0, 5.0);
  for (std::size_t trial = 0; trial < opt.n_trials; ++trial) {
    const GroupElement<double> r = random_rotation(opt.seed * 1000003ULL + trial);
    Vec3<double> t{0, 0, 0};
    if (opt.translation)
      t = {ut(rng), ut(rng), ut(rng)};
    for (const auto &name : transforms) {
      const GroupElement<double> g = name == "rotation" ? r : r.compose(GroupElement<double>::parity());
      for (auto &[head, pair] : transformed_outputs<T>(cfg, params, system, g, t, opt.heads)) {
        const auto key = std::make_pair(name, head);
        auto it = acc.find(key);
        if (it == acc.end()) {
          detail::DevAccumulator a;
          a.row.transform = name;
          a.row.head = head;
          a.row.tolerance = ps * (head == "energy" ? opt.tolerances.energy
                                  : (head == "forces" || head == "dipole") ? opt.tolerances.vector
                                                                            : opt.tolerances.tensor);
          it = acc.emplace(key, a).first;
          order.push_back(key);
        }
        it->second.add(pair.first, pair.second);
      }
    }
  }
  for (const auto &k : order)
    rep.rows.push_back(acc.at(k).row);
  return rep;
}

// ---------------------------------------------------------------------------
// Force gradient check
// ---------------------------------------------------------------------------

struct GradientReport {
  double max_abs_err = 0;
  double max_rel_err = 0; // max_k |fd_k - F_k| / max_k |F_k|
  double net_force = 0;
  double tolerance = 0;
  double net_tolerance = 0;

  bool pass() const { return max_rel_err <= tolerance && net_force <= net_tolerance; }

  std::string result_line() const {
    std::ostringstream os;
    os << "RESULT " << (pass() ? "pass" : "fail") << " max_dev=" << std::setprecision(6) << max_rel_err
       << " transform=finite_difference head=forces";
    return os.str();
  }
};

inline GradientReport gradient_report(const ModelConfig &cfg, const ParamStore &params, const AtomicSystem &system,
                                      double h = 1e-4, double tolerance = 1e-5, double net_tolerance = 1e-8) {
  if (!(h > 0))
    throw Error("gradient_report: step must be positive");
  GradientReport rep;
  rep.tolerance = tolerance;
  rep.net_tolerance = net_tolerance;
  const auto f = forces(system, params, cfg);
  double scale = 0;
  Vec3<double> net{0, 0, 0};
  for (const auto &fi : f)
    for (int k = 0; k < 3; ++k) {
      scale = std::max(scale, std::abs(fi[k]));
      net[k] += fi[k];
    }
  rep.net_force = std::hypot(net[0], net[1], net[2]);
  AtomicSystem moved = system;
  for (std::size_t i = 0; i < system.size(); ++i)
    for (int k = 0; k < 3; ++k) {
      moved.positions[i][k] = system.positions[i][k] + h;
      const double up = energy(moved, params, cfg).first;
      moved.positions[i][k] = system.positions[i][k] - h;
      const double down = energy(moved, params, cfg).first;
      moved.positions[i][k] = system.positions[i][k];
      const double fd = -(up - down) / (2 * h);
      rep.max_abs_err = std::max(rep.max_abs_err, std::abs(fd - f[i][k]));
    }
  rep.max_rel_err = rep.max_abs_err == 0 ? 0 : rep.max_abs_err / std::max(scale, 1e-300);
  return rep;
}

// ---------------------------------------------------------------------------
// Product identities
// ---------------------------------------------------------------------------

struct OracleResult {
  std::string name;
  double value = 0;
  double threshold = 0;
  bool must_exceed = false; // value > threshold instead of value <= threshold

  bool pass() const { return must_exceed ? value > threshold : value <= threshold; }
};

namespace detail {

inline double max_abs_diff(const Mat3<double> &a, const Mat3<double> &b) {
  double d = 0;
  for (int k = 0; k < 9; ++k)
    d = std::max(d, std::abs(a[k] - b[k]));
  return d;
}

inline double max_abs(const Mat3<double> &a) { return max_abs_diff(a, mat3::zero<double>()); }

struct Parts {
  Mat3<double> I, A, S;
  Mat3<double> full() const { return mat3::add(mat3::add(I, A), S); }
};

inline Parts parts_of(const Mat3<double> &x) {
  return {mat3::scalar_part(x), mat3::skew_part(x), mat3::sym_traceless_part(x)};
}

// Feature built from a vector: f_I Id + f_A skew(v) + f_S (v v^T - |v|^2/3 Id).
inline Mat3<double> from_vector(const Vec3<double> &v, double fi, double fa, double fs) {
  using namespace mat3;
  return add(add(scale(identity<double>(), fi), scale(skew_from_vector(v), fa)), scale(sym_traceless_outer(v), fs));
}

inline Mat3<double> skew_of(const Mat3<double> &m) { return mat3::skew_part(m); }

// M + M^T - 2/3 Tr(M) Id
inline Mat3<double> sym0(const Mat3<double> &m) {
  using namespace mat3;
  return sub(add(m, transpose(m)), scale(identity<double>(), 2.0 * trace(m) / 3.0));
}

} // namespace detail

// Checks the sector-by-sector structure of XY and XY + YX on random features,
// plus the model-level consequence for the normalization weights.
inline std::vector<OracleResult> appendix_oracle_suite(std::uint64_t seed, std::size_t n_cases = 1000) {
  using namespace mat3;
  using detail::Parts;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  auto vec = [&] { return Vec3<double>{nd(rng), nd(rng), nd(rng)}; };

  double transpose_parity = 0, traces = 0, xy_closed = 0, sym_closed = 0, brackets = 0, summary = 0, frob = 0;
  std::vector<double> contamination;
  for (std::size_t c = 0; c < n_cases; ++c) {
    const Vec3<double> v = vec(), w = vec();
    const double fx[3] = {nd(rng), nd(rng), nd(rng)}, fy[3] = {nd(rng), nd(rng), nd(rng)};
    const Mat3<double> x = detail::from_vector(v, fx[0], fx[1], fx[2]);
    const Mat3<double> y = detail::from_vector(w, fy[0], fy[1], fy[2]);
    const Vec3<double> nv{-v[0], -v[1], -v[2]};
    transpose_parity = std::max(transpose_parity,
                                detail::max_abs_diff(detail::from_vector(nv, fx[0], fx[1], fx[2]), transpose(x)));

    const Parts px = detail::parts_of(x), py = detail::parts_of(y);
    const Mat3<double> id = identity<double>();
    // Traces that vanish in the scalar part of XY, and the I I sector of S.
    traces = std::max({traces, std::abs(trace(add(mul(px.A, py.S), mul(px.S, py.A)))),
                       std::abs(trace(add(add(mul(px.I, py.S), mul(px.S, py.I)), add(mul(px.I, py.A), mul(px.A, py.I))))),
                       detail::max_abs(sub(mul(px.I, py.I), scale(id, trace(mul(px.I, py.I)) / 3.0)))});

    // XY sector by sector.
    const Mat3<double> aa = mul(px.A, py.A), ss = mul(px.S, py.S), as = mul(px.A, py.S), sa = mul(px.S, py.A),
                       ays = mul(py.A, px.S);
    const Mat3<double> i_xy = scale(id, trace(add(add(mul(px.I, py.I), aa), ss)) / 3.0);
    Mat3<double> a_xy = add(mul(px.I, py.A), mul(px.A, py.I));
    a_xy = add(a_xy, scale(sub(as, transpose(as)), 0.5));
    a_xy = add(a_xy, scale(sub(ays, transpose(ays)), 0.5));
    a_xy = add(a_xy, scale(sub(aa, transpose(aa)), 0.5));
    a_xy = add(a_xy, scale(sub(ss, transpose(ss)), 0.5));
    Mat3<double> s_xy = add(scale(detail::sym0(as), 0.5), scale(detail::sym0(sa), 0.5));
    s_xy = add(s_xy, add(mul(px.I, py.S), mul(px.S, py.I)));
    s_xy = add(s_xy, add(scale(detail::sym0(aa), 0.5), scale(detail::sym0(ss), 0.5)));
    const Parts pxy = detail::parts_of(mul(x, y));
    xy_closed = std::max({xy_closed, detail::max_abs_diff(i_xy, pxy.I), detail::max_abs_diff(a_xy, pxy.A),
                          detail::max_abs_diff(s_xy, pxy.S)});

    // The pseudovector piece of A^{XY}.
    const Mat3<double> pv = scale(sub(aa, transpose(aa)), 0.5);
    contamination.push_back(std::sqrt(dot(pv, pv)));

    // XY + YX against the closed forms.
    IrrepsTriple<double> tx{TensorFeature<double>(1), TensorFeature<double>(1), TensorFeature<double>(1)};
    IrrepsTriple<double> ty = tx;
    tx.I.set(0, px.I);
    tx.A.set(0, px.A);
    tx.S.set(0, px.S);
    ty.I.set(0, py.I);
    ty.A.set(0, py.A);
    ty.S.set(0, py.S);
    const IrrepsTriple<double> closed = irreps_of_sym_product(tx, ty);
    const Mat3<double> sp = add(mul(x, y), mul(y, x));
    const Parts psp = detail::parts_of(sp);
    sym_closed = std::max({sym_closed, detail::max_abs_diff(closed.I[0], psp.I),
                           detail::max_abs_diff(closed.A[0], psp.A), detail::max_abs_diff(closed.S[0], psp.S)});

    // The two brackets that cancel in A^{XY+YX}.
    const Mat3<double> ayax = mul(py.A, px.A), sysx = mul(py.S, px.S);
    brackets = std::max({brackets, detail::max_abs(scale(add(sub(aa, ayax), sub(ayax, aa)), 0.5)),
                         detail::max_abs(scale(add(sub(ss, sysx), sub(sysx, ss)), 0.5)),
                         detail::max_abs(detail::skew_of(add(aa, ayax))),
                         detail::max_abs(detail::skew_of(add(ss, sysx)))});

    // Transposed inputs: I and S unchanged, A flips.
    const Parts pt = detail::parts_of(add(mul(transpose(x), transpose(y)), mul(transpose(y), transpose(x))));
    summary = std::max({summary, detail::max_abs_diff(pt.I, psp.I), detail::max_abs_diff(pt.A, scale(psp.A, -1.0)),
                        detail::max_abs_diff(pt.S, psp.S)});

    // Frobenius norm under a rotation and an improper element.
    Mat3<double> gen;
    for (double &e : gen)
      e = nd(rng);
    const GroupElement<double> r = random_rotation(seed * 7919ULL + c);
    const GroupElement<double> ri = r.compose(GroupElement<double>::parity());
    const double n0 = dot(gen, gen);
    for (const auto &g : {r, ri}) {
      const Mat3<double> gx = detail::conj(g.matrix(), gen);
      frob = std::max(frob, std::abs(dot(gx, gx) - n0) / n0);
    }
  }

  // Normalization weights 1 / (||X|| + 1) after one interaction, on r and -r.
  auto weight_defect = [&](Group group) {
    ModelConfig cfg;
    cfg.channels = 64;
    cfg.n_rbf = 16;
    cfg.n_layers = 1;
    cfg.group = group;
    cfg.max_atomic_number = 36;
    cfg.heads = HeadSet{true, false, false, false};
    const ParamStore params = init_params(cfg, seed);
    AtomicSystem s = chiral_fixture();
    auto weights = [&](const AtomicSystem &sys) {
      Tape<double> tape;
      const auto r = run_forward(tape, Batch::make(sys, cfg.cutoff), params, cfg);
      std::vector<double> w;
      const auto &v = r.features.value();
      for (std::size_t b = 0; b < v.size() / 9; ++b) {
        double n = 0;
        for (int k = 0; k < 9; ++k)
          n += v[9 * b + k] * v[9 * b + k];
        w.push_back(1.0 / (n + 1.0));
      }
      return w;
    };
    const auto w0 = weights(s);
    for (auto &p : s.positions)
      for (double &x : p)
        x = -x;
    const auto w1 = weights(s);
    double d = 0;
    for (std::size_t k = 0; k < w0.size(); ++k)
      d = std::max(d, std::abs(w0[k] - w1[k]));
    return d;
  };

  // Typical size over the random cases.
  std::sort(contamination.begin(), contamination.end());
  const double contamination_median = contamination.empty() ? 0.0 : contamination[contamination.size() / 2];

  return {
      {"transpose_parity", transpose_parity, 1e-13},
      {"vanishing_traces", traces, 1e-13},
      {"product_sectors", xy_closed, 1e-13},
      {"pseudovector_contamination_median", contamination_median, 1e-3, true},
      {"sym_product_closed_forms", sym_closed, 1e-13},
      {"cancelling_brackets", brackets, 1e-13},
      {"transpose_summary", summary, 1e-13},
      {"frobenius_o3_invariance", frob, 1e-13},
      {"o3_norm_weights_parity", weight_defect(Group::O3), 1e-13},
      {"so3_norm_weights_parity", weight_defect(Group::SO3), 1e-10, true},
  };
}

inline std::string oracle_result_line(const std::vector<OracleResult> &results) {
  bool ok = true;
  const OracleResult *worst = nullptr;
  double score = -1;
  for (const auto &r : results) {
    ok = ok && r.pass();
    // Margin to the threshold on a log scale; the smallest margin is reported.
    const double s = r.must_exceed ? r.threshold / std::max(r.value, 1e-300) : r.value / r.threshold;
    if (s > score) {
      score = s;
      worst = &r;
    }
  }
  std::ostringstream os;
  os << "RESULT " << (ok ? "pass" : "fail") << " max_dev=" << std::setprecision(6) << (worst ? worst->value : 0.0)
     << " transform=appendix head=" << (worst ? worst->name : "none");
  return os.str();
}

} // namespace tensornet
