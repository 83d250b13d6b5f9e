#include "advtpp/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>

#include "advtpp/errors.hpp"
#include "advtpp/permattack.hpp"

namespace advtpp {

namespace {

double sign(double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); }

void project(std::vector<double>& delta, double budget) {
  for (double& d : delta) d = std::clamp(d, -budget, budget);
}

}  // namespace

void BaselineConfig::validate() const {
  if (!(eps_budget > 0)) throw ConfigError("baseline: eps_budget must be > 0");
  if (steps < 1) throw ConfigError("baseline: steps must be >= 1");
  if (step_size < 0) throw ConfigError("baseline: step_size must be >= 0");
  if (momentum < 0 || momentum >= 1) {
    throw ConfigError("baseline: momentum must be in [0, 1)");
  }
}

std::vector<double> noise_gradient(const Sequence& clean,
                                   std::span<const double> delta,
                                   const MtppParams& model,
                                   const LikelihoodOptions& lik,
                                   double* nll_out) {
  const NoisedSequence cur = apply_noise_and_sort(clean, delta);
  const EventTensors ev = to_tensors(clean, model.num_marks);
  const auto marks = clean.marks();
  const auto pert_marks = cur.sequence.marks();
  ad::Tape tape;
  const ad::Tensor t = tape.leaf(ad::Tensor::vector(cur.sequence.times()));
  const ad::Tensor nll = adv_nll(ev, marks, t, one_hot(pert_marks, model.num_marks),
                                 model, lik);
  const ad::Tensor g = tape.backward(nll).or_zero(t);
  if (nll_out) *nll_out = nll.item();
  std::vector<double> out(clean.size(), 0.0);
  for (std::size_t k = 0; k < out.size(); ++k) out[cur.perm[k]] = g[k];
  return out;
}

NoisedSequence pgd_attack(const Sequence& clean, const MtppParams& model,
                          const BaselineConfig& cfg) {
  cfg.validate();
  std::vector<double> delta(clean.size(), 0.0);
  for (int s = 0; s < cfg.steps; ++s) {
    const auto g = noise_gradient(clean, delta, model, cfg.lik);
    for (std::size_t j = 0; j < delta.size(); ++j) {
      delta[j] += cfg.step_size * sign(g[j]);
    }
    project(delta, cfg.eps_budget);
  }
  return apply_noise_and_sort(clean, delta);
}

NoisedSequence mifgsm_attack(const Sequence& clean, const MtppParams& model,
                             const BaselineConfig& cfg) {
  cfg.validate();
  std::vector<double> delta(clean.size(), 0.0);
  std::vector<double> velocity(clean.size(), 0.0);
  for (int s = 0; s < cfg.steps; ++s) {
    const auto g = noise_gradient(clean, delta, model, cfg.lik);
    double l1 = 0.0;
    for (double x : g) l1 += std::fabs(x);
    for (std::size_t j = 0; j < delta.size(); ++j) {
      velocity[j] = cfg.momentum * velocity[j] + (l1 > 0 ? g[j] / l1 : 0.0);
      delta[j] += cfg.step_size * sign(velocity[j]);
    }
    project(delta, cfg.eps_budget);
  }
  return apply_noise_and_sort(clean, delta);
}

NoisedSequence random_perm_control(const Sequence& clean, double target,
                                   std::mt19937_64& rng,
                                   const DistanceParams& params) {
  if (!(target > 0)) throw ConfigError("random control: target must be > 0");
  const std::size_t n = clean.size();
  const auto times = clean.times();
  // Swaps take at most half the budget; a swap of differing marks costs at
  // least 2 rho_c.
  const std::size_t max_swaps =
      n < 2 ? 0
            : (params.rho_c > 0
                   ? static_cast<std::size_t>(0.5 * target / (2.0 * params.rho_c))
                   : n);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::vector<std::size_t> order(n);
  std::vector<double> dir(n), delta(n);
  // Event order[i] takes slot i's time plus amp * dir[i].
  auto propose = [&](double amp) {
    for (std::size_t i = 0; i < n; ++i) {
      delta[order[i]] = times[i] - times[order[i]] + amp * dir[i];
    }
    NoisedSequence out = apply_noise_and_sort(clean, delta);
    const double d = distance_hard(clean, out.sequence, params);
    return std::pair{std::move(out), d};
  };
  auto in_window = [&](double d) { return d >= 0.9 * target && d <= 1.1 * target; };
  for (int k = 0; k < kControlProposals; ++k) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t swaps =
        std::uniform_int_distribution<std::size_t>(0, max_swaps)(rng);
    for (std::size_t s = 0; s < swaps; ++s) {
      const std::size_t i = std::uniform_int_distribution<std::size_t>(0, n - 2)(rng);
      std::swap(order[i], order[i + 1]);
    }
    // Noise lands on a random subset of random size, so dense stretches can
    // be left alone when small targets forbid crossings.
    std::vector<std::size_t> slots(n);
    std::iota(slots.begin(), slots.end(), std::size_t{0});
    std::shuffle(slots.begin(), slots.end(), rng);
    const std::size_t support = std::uniform_int_distribution<std::size_t>(1, n)(rng);
    std::fill(dir.begin(), dir.end(), 0.0);
    for (std::size_t i = 0; i < support; ++i) dir[slots[i]] = unit(rng);
    auto [out, d] = propose(0.0);
    if (in_window(d)) return out;
    if (d > target) continue;
    // Distance grows with the noise amplitude; bracket the target and bisect.
    double lo = 0.0;
    double hi = target / static_cast<double>(std::max<std::size_t>(n - 1, 1));
    for (int g = 0; g < 60 && propose(hi).second < target; ++g) {
      lo = hi;
      hi *= 2.0;
    }
    for (int b = 0; b < 60; ++b) {
      const double mid = 0.5 * (lo + hi);
      auto [cand, dm] = propose(mid);
      if (in_window(dm)) return cand;
      (dm < target ? lo : hi) = mid;
    }
  }
  throw DataError("random control: no proposal within 10% of distance " +
                  std::to_string(target) + " after " +
                  std::to_string(kControlProposals) + " tries");
}

}  // namespace advtpp
