#ifndef ADVTPP_BASELINES_HPP_
#define ADVTPP_BASELINES_HPP_

// Additive time-noise baselines (PGD, MI-FGSM) and a random permutation
// control used to compare attacks at equal hard distance.
//
// The gradient attacks perturb timestamps only. Each step takes the gradient
// of the learner's nll of the clean events, conditioned on the current
// perturbed history, with respect to the perturbed times at fixed order; the
// sequence is re-sorted between steps.

#include <random>

#include "advtpp/ctes.hpp"
#include "advtpp/mtpp.hpp"

namespace advtpp {

struct BaselineConfig {
  double eps_budget = 0.5;  // L-inf bound on per-event time noise
  int steps = 10;
  double step_size = 0.05;
  double momentum = 0.9;    // MI-FGSM only
  LikelihoodOptions lik;

  void validate() const;
};

// Gradient of the adversarial nll with respect to the noise of every original
// event, evaluated at noise delta.
std::vector<double> noise_gradient(const Sequence& clean,
                                   std::span<const double> delta,
                                   const MtppParams& model,
                                   const LikelihoodOptions& lik,
                                   double* nll_out = nullptr);

NoisedSequence pgd_attack(const Sequence& clean, const MtppParams& model,
                          const BaselineConfig& cfg);
NoisedSequence mifgsm_attack(const Sequence& clean, const MtppParams& model,
                             const BaselineConfig& cfg);

// Random adjacent-swap walk plus uniform time noise. Each proposal draws the
// walk and a sparse noise direction, then bisects the noise amplitude until the hard
// distance lands within 10% of target. Throws DataError after 1000 proposals.
NoisedSequence random_perm_control(const Sequence& clean, double target,
                                   std::mt19937_64& rng,
                                   const DistanceParams& params = {});

inline constexpr int kControlProposals = 1000;

}  // namespace advtpp

#endif  // ADVTPP_BASELINES_HPP_
