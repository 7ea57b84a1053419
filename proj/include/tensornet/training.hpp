#pragma once

// Losses, Adam, learning-rate scheduling and the training loop.
//
// Gradients of the force term need d/dtheta of -dU/dr. They are obtained
// exactly by replaying the forward/backward pass in Dual<double> with the
// positions perturbed along -dL/dF: the tangent part of the parameter adjoint
// is then the mixed second derivative contracted with that direction.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tensornet/autodiff.hpp"
#include "tensornet/dual.hpp"
#include "tensornet/elements.hpp"
#include "tensornet/model.hpp"

namespace tensornet {

struct LossWeights {
  double energy = 0.5;
  double forces = 0.5;
  double dipole = 0.0;
  double polarizability = 0.0;
  double shielding = 0.0;
};

struct TrainConfig {
  std::size_t batch_size = 8;
  double lr_init = 1e-3;
  std::size_t warmup_steps = 500;
  std::size_t plateau_patience = 25;
  double plateau_factor = 0.8;
  double lr_min = 1e-8;
  LossWeights loss_weights;
  double ema_weight = 0.99; // 0 disables smoothing of the energy validation term
  double grad_clip_norm = 40.0;
  std::size_t max_epochs = 1000;
  std::size_t max_steps = 0; // 0: unlimited
  std::size_t early_stop_patience = 300;
  std::size_t n_val = 0;     // 0: validate on the training set
  bool standardize_energy = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size == 0)
      throw Error("TrainConfig: batch_size must be positive");
    if (!(lr_init > 0) || !(lr_min > 0))
      throw Error("TrainConfig: learning rates must be positive");
    if (!(plateau_factor > 0 && plateau_factor < 1))
      throw Error("TrainConfig: plateau_factor must lie in (0, 1)");
    if (!(ema_weight >= 0 && ema_weight < 1))
      throw Error("TrainConfig: ema_weight must lie in [0, 1)");
    if (!(grad_clip_norm > 0))
      throw Error("TrainConfig: grad_clip_norm must be positive");
    if (plateau_patience == 0)
      throw Error("TrainConfig: plateau_patience must be positive");
    const auto &w = loss_weights;
    for (double v : {w.energy, w.forces, w.dipole, w.polarizability, w.shielding})
      if (!(v >= 0) || !std::isfinite(v))
        throw Error("TrainConfig: loss weights must be finite and non-negative");
  }
};

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

struct LossBreakdown {
  double total = 0;
  double energy = 0; // MSE per term, unweighted
  double forces = 0;
  double dipole = 0;
  double polarizability = 0;
  double shielding = 0;
};

namespace detail {
inline void require_label(bool present, const char *term, std::size_t system) {
  if (!present)
    throw Error(std::string("loss: term '") + term + "' has nonzero weight but system " +
                std::to_string(system) + " has no label");
}
} // namespace detail

// sum_t w_t MSE_t. Forces average over atoms and components, tensor terms
// over entries.
inline LossBreakdown loss(std::span<const SystemPrediction> pred, std::span<const AtomicSystem *const> labels,
                          const LossWeights &w) {
  if (pred.size() != labels.size() || pred.empty())
    throw Error("loss: prediction and label counts differ or are empty");
  LossBreakdown out;
  double n_force = 0, n_shield = 0;
  for (std::size_t s = 0; s < pred.size(); ++s) {
    const AtomicSystem &sys = *labels[s];
    const SystemPrediction &p = pred[s];
    if (w.energy > 0) {
      detail::require_label(sys.energy.has_value(), "energy", s);
      const double e = p.energy - *sys.energy;
      out.energy += e * e;
    }
    if (w.forces > 0) {
      detail::require_label(sys.forces.has_value(), "forces", s);
      for (std::size_t i = 0; i < sys.size(); ++i)
        for (int k = 0; k < 3; ++k) {
          const double e = p.forces.at(i)[k] - (*sys.forces)[i][k];
          out.forces += e * e;
        }
      n_force += 3.0 * static_cast<double>(sys.size());
    }
    if (w.dipole > 0) {
      detail::require_label(sys.dipole.has_value(), "dipole", s);
      for (int k = 0; k < 3; ++k) {
        const double e = p.dipole.value()[k] - (*sys.dipole)[k];
        out.dipole += e * e;
      }
    }
    if (w.polarizability > 0) {
      detail::require_label(sys.polarizability.has_value(), "polarizability", s);
      for (int k = 0; k < 9; ++k) {
        const double e = p.polarizability.value()[k] - (*sys.polarizability)[k];
        out.polarizability += e * e;
      }
    }
    if (w.shielding > 0) {
      detail::require_label(sys.shieldings.has_value(), "shielding", s);
      for (std::size_t i = 0; i < sys.size(); ++i)
        for (int k = 0; k < 9; ++k) {
          const double e = p.shieldings.value()[i][k] - (*sys.shieldings)[i][k];
          out.shielding += e * e;
        }
      n_shield += 9.0 * static_cast<double>(sys.size());
    }
  }
  const double b = static_cast<double>(pred.size());
  out.energy /= b;
  if (n_force > 0)
    out.forces /= n_force;
  out.dipole /= 3.0 * b;
  out.polarizability /= 9.0 * b;
  if (n_shield > 0)
    out.shielding /= n_shield;
  out.total = w.energy * out.energy + w.forces * out.forces + w.dipole * out.dipole +
              w.polarizability * out.polarizability + w.shielding * out.shielding;
  return out;
}

inline HeadSet heads_for(const LossWeights &w) {
  return {w.energy > 0 || w.forces > 0, w.dipole > 0, w.polarizability > 0, w.shielding > 0};
}

namespace detail {

// Direct (non-force) loss terms recorded on the tape.
template <class T>
Var<T> direct_loss(Tape<T> &tape, const ForwardResult<T> &r, std::span<const AtomicSystem *const> systems,
                   const LossWeights &w) {
  Var<T> total{};
  auto accumulate = [&](Var<T> term, double weight) {
    term = scale(term, weight);
    total = total.valid() ? add(total, term) : term;
  };
  const std::size_t b = systems.size();
  if (w.energy > 0) {
    std::vector<T> ref(b);
    for (std::size_t s = 0; s < b; ++s) {
      require_label(systems[s]->energy.has_value(), "energy", s);
      ref[s] = T(*systems[s]->energy);
    }
    accumulate(mean_square(sub(r.energy, tape.constant(Shape{b, 1}, std::move(ref), "energy_label"))), w.energy);
  }
  if (w.dipole > 0) {
    std::vector<T> ref(3 * b);
    for (std::size_t s = 0; s < b; ++s) {
      require_label(systems[s]->dipole.has_value(), "dipole", s);
      for (int k = 0; k < 3; ++k)
        ref[3 * s + k] = T((*systems[s]->dipole)[k]);
    }
    accumulate(mean_square(sub(r.dipole, tape.constant(Shape{b, 3}, std::move(ref), "dipole_label"))), w.dipole);
  }
  if (w.polarizability > 0) {
    std::vector<T> ref(9 * b);
    for (std::size_t s = 0; s < b; ++s) {
      require_label(systems[s]->polarizability.has_value(), "polarizability", s);
      for (int k = 0; k < 9; ++k)
        ref[9 * s + k] = T((*systems[s]->polarizability)[k]);
    }
    accumulate(mean_square(sub(r.polarizability, tape.constant(Shape{b, 9}, std::move(ref), "polarizability_label"))),
               w.polarizability);
  }
  if (w.shielding > 0) {
    std::vector<T> ref;
    for (std::size_t s = 0; s < b; ++s) {
      require_label(systems[s]->shieldings.has_value(), "shielding", s);
      for (const auto &m : *systems[s]->shieldings)
        for (int k = 0; k < 9; ++k)
          ref.push_back(T(m[k]));
    }
    const std::size_t n = ref.size() / 9;
    accumulate(mean_square(sub(r.shielding, tape.constant(Shape{n, 9}, std::move(ref), "shielding_label"))),
               w.shielding);
  }
  return total;
}

} // namespace detail

// Loss over one minibatch and its exact gradient, accumulated into
// params.grad (which is zeroed first).
inline LossBreakdown loss_and_gradient(std::span<const AtomicSystem *const> systems, ParamStore &params,
                                       const ModelConfig &cfg, const LossWeights &w) {
  const Batch batch = Batch::make(systems, cfg.cutoff);
  params.zero_grad();
  const HeadSet heads = heads_for(w);
  std::vector<SystemPrediction> pred;

  if (w.forces <= 0) {
    Tape<double> tape;
    ForwardOptions<double> fo{true, heads, nullptr};
    const auto r = run_forward(tape, batch, params, cfg, fo);
    Var<double> ld = detail::direct_loss(tape, r, systems, w);
    if (!ld.valid())
      return LossBreakdown{};
    tape.backward(ld);
    tape.for_each_param_grad([&](std::size_t idx, std::span<const double> g) {
      auto &dst = params.at(idx).grad;
      for (std::size_t k = 0; k < g.size(); ++k)
        dst[k] += g[k];
    });
    // Values for the breakdown come from the same forward pass.
    pred.resize(batch.n_systems());
    for (std::size_t s = 0; s < batch.n_systems(); ++s) {
      auto &o = pred[s];
      if (r.energy.valid())
        o.energy = r.energy.value()[s];
      if (r.dipole.valid())
        o.dipole = Vec3<double>{r.dipole.value()[3 * s], r.dipole.value()[3 * s + 1], r.dipole.value()[3 * s + 2]};
      if (r.polarizability.valid()) {
        Mat3<double> m;
        for (int k = 0; k < 9; ++k)
          m[k] = r.polarizability.value()[9 * s + k];
        o.polarizability = m;
      }
      if (r.shielding.valid()) {
        std::vector<Mat3<double>> sh;
        for (std::size_t i = batch.atom_offset[s]; i < batch.atom_offset[s + 1]; ++i) {
          Mat3<double> m;
          for (int k = 0; k < 9; ++k)
            m[k] = r.shielding.value()[9 * i + k];
          sh.push_back(m);
        }
        o.shieldings = std::move(sh);
      }
    }
    return loss(pred, systems, w);
  }

  // Pass 1: forces in double.
  std::vector<double> force_flat(3 * batch.n_atoms());
  {
    Tape<double> tape;
    ForwardOptions<double> fo{false, HeadSet{true, false, false, false}, nullptr};
    const auto r = run_forward(tape, batch, params, cfg, fo);
    tape.backward(sum_all(r.energy));
    const auto g = tape.gradient(r.positions);
    for (std::size_t k = 0; k < g.size(); ++k)
      force_flat[k] = -g[k];
  }
  double n_force = 0;
  for (std::size_t s = 0; s < systems.size(); ++s) {
    detail::require_label(systems[s]->forces.has_value(), "forces", s);
    n_force += 3.0 * static_cast<double>(systems[s]->size());
  }
  // v = dL_F/dF; positions are perturbed along -v.
  std::vector<Dual<double>> pos(3 * batch.n_atoms());
  for (std::size_t s = 0, i = 0; s < systems.size(); ++s)
    for (std::size_t a = 0; a < systems[s]->size(); ++a, ++i)
      for (int k = 0; k < 3; ++k) {
        const double v = 2.0 * w.forces * (force_flat[3 * i + k] - (*systems[s]->forces)[a][k]) / n_force;
        pos[3 * i + k] = Dual<double>(batch.positions[i][k], -v);
      }

  Tape<Dual<double>> tape;
  ForwardOptions<Dual<double>> fo{true, heads, &pos};
  const auto r = run_forward(tape, batch, params, cfg, fo);
  std::vector<Tape<Dual<double>>::Seed> seeds;
  seeds.push_back({sum_all(r.energy), {Dual<double>(1.0, 0.0)}});
  Var<Dual<double>> ld = detail::direct_loss(tape, r, systems, w);
  if (ld.valid())
    seeds.push_back({ld, {Dual<double>(0.0, 1.0)}});
  tape.backward(std::span<const Tape<Dual<double>>::Seed>(seeds));
  tape.for_each_param_grad([&](std::size_t idx, std::span<const Dual<double>> g) {
    auto &dst = params.at(idx).grad;
    for (std::size_t k = 0; k < g.size(); ++k)
      dst[k] += g[k].d;
  });

  pred.resize(batch.n_systems());
  for (std::size_t s = 0; s < batch.n_systems(); ++s) {
    auto &o = pred[s];
    o.energy = primal(r.energy.value()[s]);
    for (std::size_t i = batch.atom_offset[s]; i < batch.atom_offset[s + 1]; ++i)
      o.forces.push_back({force_flat[3 * i], force_flat[3 * i + 1], force_flat[3 * i + 2]});
    if (r.dipole.valid())
      o.dipole = Vec3<double>{primal(r.dipole.value()[3 * s]), primal(r.dipole.value()[3 * s + 1]),
                              primal(r.dipole.value()[3 * s + 2])};
    if (r.polarizability.valid()) {
      Mat3<double> m;
      for (int k = 0; k < 9; ++k)
        m[k] = primal(r.polarizability.value()[9 * s + k]);
      o.polarizability = m;
    }
    if (r.shielding.valid()) {
      std::vector<Mat3<double>> sh;
      for (std::size_t i = batch.atom_offset[s]; i < batch.atom_offset[s + 1]; ++i) {
        Mat3<double> m;
        for (int k = 0; k < 9; ++k)
          m[k] = primal(r.shielding.value()[9 * i + k]);
        sh.push_back(m);
      }
      o.shieldings = std::move(sh);
    }
  }
  return loss(pred, systems, w);
}

// Scales all gradients so their global L2 norm is at most max_norm. Returns
// the norm before clipping.
inline double clip_grad_norm(ParamStore &params, double max_norm) {
  double sq = 0;
  for (const auto &e : params.entries())
    for (double g : e.grad)
      sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double f = max_norm / norm;
    for (auto &e : params.entries())
      for (double &g : e.grad)
        g *= f;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;

  static OptimState for_params(const ParamStore &params) {
    OptimState s;
    for (const auto &e : params.entries()) {
      s.m.emplace_back(e.values.size(), 0.0);
      s.v.emplace_back(e.values.size(), 0.0);
    }
    return s;
  }
};

// One bias-corrected Adam update using params.grad.
inline void adam_step(ParamStore &params, OptimState &opt, double lr, const AdamHyper &h = {}) {
  if (opt.m.size() != params.size() || opt.v.size() != params.size())
    throw Error("adam_step: optimizer state does not match parameters");
  for (const auto &e : params.entries())
    for (double g : e.grad)
      if (!std::isfinite(g))
        throw Error("adam_step: non-finite gradient for parameter '" + e.name + "'");
  opt.step += 1;
  const double t = static_cast<double>(opt.step);
  const double bc1 = 1.0 - std::pow(h.beta1, t);
  const double bc2 = 1.0 - std::pow(h.beta2, t);
  const double step_size = lr / bc1;
  const double sqrt_bc2 = std::sqrt(bc2);
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto &e = params.at(p);
    auto &m = opt.m[p];
    auto &v = opt.v[p];
    for (std::size_t k = 0; k < e.values.size(); ++k) {
      const double g = e.grad[k];
      m[k] = h.beta1 * m[k] + (1.0 - h.beta1) * g;
      v[k] = h.beta2 * v[k] + (1.0 - h.beta2) * g * g;
      e.values[k] -= step_size * m[k] / (std::sqrt(v[k]) / sqrt_bc2 + h.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Learning-rate schedule
// ---------------------------------------------------------------------------

// Linear warm-up followed by reduce-on-plateau on the validation metric. The
// metric is compared against the best value so far; strict improvement resets
// the patience counter.
class LrScheduler {
public:
  struct State {
    double plateau_lr = 0;
    double best = std::numeric_limits<double>::infinity();
    std::size_t bad_epochs = 0;
    std::size_t epochs_since_best = 0;
    std::optional<double> ema_energy;
  };

  explicit LrScheduler(const TrainConfig &cfg) : cfg_(cfg) { state_.plateau_lr = cfg.lr_init; }
  LrScheduler(const TrainConfig &cfg, State s) : cfg_(cfg), state_(s) {}

  // Rate for the update with 1-based index `step`; 0 before any update.
  double lr(std::uint64_t step) const {
    double ramp = 1.0;
    if (cfg_.warmup_steps > 0)
      ramp = std::min(1.0, static_cast<double>(step) / static_cast<double>(cfg_.warmup_steps));
    return state_.plateau_lr * ramp;
  }

  // Smooths the energy term when ema_weight > 0; returns the metric value.
  double smooth(const LossBreakdown &val) {
    double e = val.energy;
    if (cfg_.ema_weight > 0) {
      state_.ema_energy = state_.ema_energy ? cfg_.ema_weight * *state_.ema_energy + (1.0 - cfg_.ema_weight) * e : e;
      e = *state_.ema_energy;
    }
    const auto &w = cfg_.loss_weights;
    return val.total - w.energy * val.energy + w.energy * e;
  }

  // Feeds one epoch's validation metric. Returns true when it improved.
  bool observe(double metric) {
    if (metric < state_.best) {
      state_.best = metric;
      state_.bad_epochs = 0;
      state_.epochs_since_best = 0;
      return true;
    }
    state_.bad_epochs += 1;
    state_.epochs_since_best += 1;
    if (state_.bad_epochs >= cfg_.plateau_patience) {
      state_.plateau_lr = std::max(cfg_.lr_min, state_.plateau_lr * cfg_.plateau_factor);
      state_.bad_epochs = 0;
    }
    return false;
  }

  bool should_stop() const {
    return state_.plateau_lr <= cfg_.lr_min || state_.epochs_since_best >= cfg_.early_stop_patience;
  }

  const State &state() const noexcept { return state_; }

private:
  TrainConfig cfg_;
  State state_;
};

// Replays a validation history and returns the rate used at `step`.
inline double lr_schedule(std::uint64_t step, std::span<const double> epoch_val_loss_history, const TrainConfig &cfg) {
  LrScheduler s(cfg);
  for (double v : epoch_val_loss_history)
    s.observe(v);
  return s.lr(step);
}

// ---------------------------------------------------------------------------
// Dataset utilities
// ---------------------------------------------------------------------------

struct EnergyStats {
  double mean_per_atom = 0;
  double std = 1;
};

inline EnergyStats energy_stats(std::span<const AtomicSystem *const> systems) {
  EnergyStats st;
  if (systems.empty())
    return st;
  double sum = 0, sum_pa = 0;
  for (const auto *s : systems) {
    if (!s->energy)
      throw Error("energy_stats: system without an energy label");
    sum += *s->energy;
    sum_pa += *s->energy / static_cast<double>(s->size());
  }
  const double n = static_cast<double>(systems.size());
  const double mean = sum / n;
  double var = 0;
  for (const auto *s : systems)
    var += (*s->energy - mean) * (*s->energy - mean);
  var /= n;
  st.mean_per_atom = sum_pa / n;
  st.std = var > 0 ? std::sqrt(var) : 1.0;
  return st;
}

// Least-squares per-element energy offsets: minimizes sum_s (E_s - sum_i ref[z_i])^2.
inline std::vector<double> fit_atom_ref(std::span<const AtomicSystem *const> systems, int max_atomic_number) {
  std::vector<int> elems;
  for (const auto *s : systems)
    for (int z : s->atomic_numbers)
      if (std::find(elems.begin(), elems.end(), z) == elems.end())
        elems.push_back(z);
  std::sort(elems.begin(), elems.end());
  const std::size_t k = elems.size();
  std::vector<double> ata(k * k, 0.0), atb(k, 0.0);
  for (const auto *s : systems) {
    if (!s->energy)
      throw Error("fit_atom_ref: system without an energy label");
    std::vector<double> row(k, 0.0);
    for (int z : s->atomic_numbers)
      row[std::lower_bound(elems.begin(), elems.end(), z) - elems.begin()] += 1.0;
    for (std::size_t a = 0; a < k; ++a) {
      atb[a] += row[a] * *s->energy;
      for (std::size_t b = 0; b < k; ++b)
        ata[a * k + b] += row[a] * row[b];
    }
  }
  // Small ridge keeps rank-deficient compositions (e.g. fixed stoichiometry) solvable.
  for (std::size_t a = 0; a < k; ++a)
    ata[a * k + a] += 1e-10;
  // Gaussian elimination with partial pivoting.
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < k; ++r)
      if (std::abs(ata[r * k + c]) > std::abs(ata[piv * k + c]))
        piv = r;
    for (std::size_t j = 0; j < k; ++j)
      std::swap(ata[c * k + j], ata[piv * k + j]);
    std::swap(atb[c], atb[piv]);
    for (std::size_t r = c + 1; r < k; ++r) {
      const double f = ata[r * k + c] / ata[c * k + c];
      for (std::size_t j = c; j < k; ++j)
        ata[r * k + j] -= f * ata[c * k + j];
      atb[r] -= f * atb[c];
    }
  }
  std::vector<double> x(k);
  for (std::size_t c = k; c-- > 0;) {
    double s = atb[c];
    for (std::size_t j = c + 1; j < k; ++j)
      s -= ata[c * k + j] * x[j];
    x[c] = s / ata[c * k + c];
  }
  std::vector<double> ref(static_cast<std::size_t>(max_atomic_number) + 1, 0.0);
  for (std::size_t a = 0; a < k; ++a) {
    if (elems[a] > max_atomic_number)
      throw Error("fit_atom_ref: element " + element_name(elems[a]) + " exceeds max_atomic_number");
    ref[elems[a]] = x[a];
  }
  return ref;
}

// Deterministic permutation of [0, n).
inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> u(0, i - 1);
    std::swap(idx[i - 1], idx[u(rng)]);
  }
  return idx;
}

struct EvalMetrics {
  LossBreakdown loss;
  double energy_mae = 0;
  double force_mae = 0;
};

inline EvalMetrics evaluate(std::span<const AtomicSystem *const> systems, const ParamStore &params,
                            const ModelConfig &cfg, const LossWeights &w, std::size_t batch_size = 64) {
  EvalMetrics m;
  if (systems.empty())
    return m;
  std::vector<SystemPrediction> pred;
  PredictOptions po;
  po.forces = w.forces > 0 || w.energy > 0;
  po.heads = heads_for(w);
  for (std::size_t s = 0; s < systems.size(); s += batch_size) {
    const std::size_t e = std::min(systems.size(), s + batch_size);
    auto part = predict(systems.subspan(s, e - s), params, cfg, po);
    pred.insert(pred.end(), part.begin(), part.end());
  }
  m.loss = loss(pred, systems, w);
  double ne = 0, nf = 0;
  for (std::size_t s = 0; s < systems.size(); ++s) {
    if (systems[s]->energy && po.heads.energy) {
      m.energy_mae += std::abs(pred[s].energy - *systems[s]->energy);
      ne += 1;
    }
    if (systems[s]->forces && po.forces && po.heads.energy)
      for (std::size_t i = 0; i < systems[s]->size(); ++i)
        for (int k = 0; k < 3; ++k) {
          m.force_mae += std::abs(pred[s].forces[i][k] - (*systems[s]->forces)[i][k]);
          nf += 1;
        }
  }
  if (ne > 0)
    m.energy_mae /= ne;
  if (nf > 0)
    m.force_mae /= nf;
  return m;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;
  std::uint64_t step = 0;
  double lr = 0;
  double train_loss = 0;
  double val_loss = 0; // scheduler metric
  LossBreakdown val;
};

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

// `epoch <e> step <s> lr <x> train_loss <x> val_loss <x> energy=<x> ...`
inline std::string format_metrics_line(const EpochRecord &r, const LossWeights &w) {
  std::ostringstream os;
  os << "epoch " << r.epoch << " step " << r.step << " lr " << format_double(r.lr) << " train_loss "
     << format_double(r.train_loss) << " val_loss " << format_double(r.val_loss);
  if (w.energy > 0)
    os << " energy=" << format_double(r.val.energy);
  if (w.forces > 0)
    os << " forces=" << format_double(r.val.forces);
  if (w.dipole > 0)
    os << " dipole=" << format_double(r.val.dipole);
  if (w.polarizability > 0)
    os << " polarizability=" << format_double(r.val.polarizability);
  if (w.shielding > 0)
    os << " shielding=" << format_double(r.val.shielding);
  return os.str();
}

// Everything needed to continue training from an epoch boundary.
struct TrainState {
  ModelConfig model;
  ParamStore params;
  OptimState opt;
  LrScheduler::State scheduler;
  std::uint64_t step = 0;
  std::size_t epoch = 0; // epochs completed
  ParamStore best_params;
  double best_metric = std::numeric_limits<double>::infinity();
  std::vector<EpochRecord> history;
};

struct TrainHooks {
  // Called after every optimizer update with the 1-based step and the
  // minibatch loss evaluated before the update.
  std::function<void(std::uint64_t, const LossBreakdown &, const ParamStore &)> on_step;
  std::function<void(const EpochRecord &, const TrainState &)> on_epoch;
};

struct DataSplit {
  std::vector<const AtomicSystem *> train;
  std::vector<const AtomicSystem *> val;
};

inline DataSplit split_dataset(std::span<const AtomicSystem> systems, const TrainConfig &cfg) {
  if (systems.empty())
    throw Error("train: dataset is empty");
  if (cfg.n_val >= systems.size())
    throw Error("train: n_val leaves no training systems");
  const auto idx = shuffled_indices(systems.size(), cfg.seed);
  DataSplit d;
  for (std::size_t k = 0; k < idx.size(); ++k)
    (k < cfg.n_val ? d.val : d.train).push_back(&systems[idx[k]]);
  if (d.val.empty())
    d.val = d.train;
  return d;
}

// Fresh state: parameters initialized from the seed and energy statistics
// fitted on the training split when requested.
inline TrainState initial_state(std::span<const AtomicSystem> systems, ModelConfig model, const TrainConfig &cfg) {
  const DataSplit split = split_dataset(systems, cfg);
  const HeadSet need = heads_for(cfg.loss_weights);
  model.heads.energy = model.heads.energy || need.energy;
  model.heads.dipole = model.heads.dipole || need.dipole;
  model.heads.polarizability = model.heads.polarizability || need.polarizability;
  model.heads.shielding = model.heads.shielding || need.shielding;
  if (cfg.standardize_energy && need.energy) {
    const EnergyStats st = energy_stats(split.train);
    model.energy_scale = st.std;
    model.energy_shift = st.mean_per_atom;
  }
  TrainState s;
  s.model = model;
  s.params = init_params(model, cfg.seed);
  s.opt = OptimState::for_params(s.params);
  s.scheduler = LrScheduler(cfg).state();
  s.best_params = s.params;
  return s;
}

// Runs epochs until max_epochs, max_steps or the scheduler's stop rule. The
// state is updated in place so callers can checkpoint it.
inline void train_loop(std::span<const AtomicSystem> systems, TrainState &state, const TrainConfig &cfg,
                       const TrainHooks &hooks = {}) {
  cfg.validate();
  const DataSplit split = split_dataset(systems, cfg);
  LrScheduler sched(cfg, state.scheduler);
  const ModelConfig &mcfg = state.model;
  const LossWeights &w = cfg.loss_weights;

  while (state.epoch < cfg.max_epochs && !(cfg.max_steps > 0 && state.step >= cfg.max_steps) &&
         !sched.should_stop()) {
    const auto order = shuffled_indices(split.train.size(), cfg.seed * 1000003ULL + state.epoch + 1);
    double train_sum = 0;
    std::size_t n_batches = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      if (cfg.max_steps > 0 && state.step >= cfg.max_steps)
        break;
      std::vector<const AtomicSystem *> batch;
      for (std::size_t k = b; k < std::min(order.size(), b + cfg.batch_size); ++k)
        batch.push_back(split.train[order[k]]);
      const LossBreakdown lb = loss_and_gradient(batch, state.params, mcfg, w);
      if (!std::isfinite(lb.total))
        throw Error("train: non-finite loss at epoch " + std::to_string(state.epoch) + ", step " +
                    std::to_string(state.step + 1));
      clip_grad_norm(state.params, cfg.grad_clip_norm);
      adam_step(state.params, state.opt, sched.lr(state.step + 1));
      state.step += 1;
      train_sum += lb.total;
      n_batches += 1;
      if (hooks.on_step)
        hooks.on_step(state.step, lb, state.params);
    }
    const EvalMetrics val = evaluate(split.val, state.params, mcfg, w, cfg.batch_size);
    EpochRecord rec;
    rec.epoch = state.epoch;
    rec.step = state.step;
    rec.lr = sched.lr(state.step);
    rec.train_loss = n_batches ? train_sum / static_cast<double>(n_batches) : 0.0;
    rec.val = val.loss;
    rec.val_loss = sched.smooth(val.loss);
    if (rec.val_loss < state.best_metric) {
      state.best_metric = rec.val_loss;
      state.best_params = state.params;
    }
    sched.observe(rec.val_loss);
    state.scheduler = sched.state();
    state.epoch += 1;
    state.history.push_back(rec);
    if (hooks.on_epoch)
      hooks.on_epoch(rec, state);
  }
}

} // namespace tensornet
