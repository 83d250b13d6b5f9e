#ifndef ADVTPP_PERMATTACK_HPP_
#define ADVTPP_PERMATTACK_HPP_

// Permutation-plus-noise attack on a marked point process learner.
//
// A pairwise MLP scores every (i, j) pair of history embeddings; Sinkhorn
// normalization turns exp(S / tau) into a soft permutation P. The permuted
// sequence (P t, P C) drives a small causal attention network that emits
// per-position time noise eps, giving perturbed times t' = P t + eps.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "advtpp/autodiff.hpp"
#include "advtpp/ctes.hpp"
#include "advtpp/mtpp.hpp"

namespace advtpp {

struct AttackConfig {
  double tau = 1.0;        // Sinkhorn temperature, > 0
  int sinkhorn_iters = 20; // row-then-column normalization rounds, >= 1
  double rho_d = 1.0;      // weight of the soft distance
  double rho_ab = 10.0;    // weight of the chronology hinge
  double rho_c = 1.0;      // mark mismatch weight inside the distance
  LikelihoodOptions lik;

  void validate() const;
};

struct AttackParams {
  int num_marks = 0;
  int model_dim = 0;  // width of the adversary's history embeddings
  int dim = 0;        // width of the noise network
  int hidden = 0;     // hidden units of the pairwise scorer
  int time_dim = 0;   // time-encoding width appended to each embedding, 0 = none

  // F = model_dim + time_dim is the per-event feature width seen by the scorer.
  ad::Tensor gs_w1;     // [2F, hidden]; rows [0, F) see event i, the rest event j
  ad::Tensor gs_b1;     // [hidden]
  ad::Tensor gs_w2;     // [hidden]
  ad::Tensor gs_b2;     // []
  ad::Tensor noise_wc;  // [C+1, dim]
  ad::Tensor noise_wt;  // [dim]
  ad::Tensor attn_q;    // [dim, dim]
  ad::Tensor attn_k;    // [dim, dim]
  ad::Tensor attn_v;    // [dim, dim]
  ad::Tensor out_w;     // [dim]
  ad::Tensor out_b;     // []

  static AttackParams zeros(int num_marks, int model_dim, int dim, int hidden,
                            int time_dim);
  static AttackParams random(int num_marks, int model_dim, int dim, int hidden,
                             int time_dim, std::uint64_t seed);

  std::size_t feature_dim() const {
    return static_cast<std::size_t>(model_dim + time_dim);
  }

  template <class F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

 private:
  template <class Self, class F>
  static void visit_impl(Self& s, F& f) {
    f("gs_w1", s.gs_w1);
    f("gs_b1", s.gs_b1);
    f("gs_w2", s.gs_w2);
    f("gs_b2", s.gs_b2);
    f("noise_wc", s.noise_wc);
    f("noise_wt", s.noise_wt);
    f("attn_q", s.attn_q);
    f("attn_k", s.attn_k);
    f("attn_v", s.attn_v);
    f("out_w", s.out_w);
    f("out_b", s.out_b);
  }
};

// Chronology constraints A eps <= B (P t) over the real prefix of length m:
// rows i < m-1 encode t'_i <= t'_{i+1}, row m-1 encodes t'_0 >= 0.
struct ConstraintSystem {
  ad::Tensor a;  // [n, n]
  ad::Tensor b;  // [n, n]
};

ConstraintSystem constraint_system(std::size_t n, std::size_t real_length);

// Per-event scorer input [h_i, PE(t_i)], [n, F].
ad::Tensor pair_features(const ad::Tensor& h_emb, const ad::Tensor& times,
                         const AttackParams& params);

// Pairwise scores S[i, j] = w2 . tanh(W1 [x_i; x_j] + b1) + b2, [n, n].
ad::Tensor pair_scores(const ad::Tensor& features, const AttackParams& params);

// Soft permutation from scores. Padded rows and columns (mask == 0) are
// pinned to the identity. Normalization runs in the log domain, which is
// the same iteration as normalizing exp(S / tau) directly but cannot
// overflow or underflow to an all-zero row at small tau.
ad::Tensor sinkhorn(const ad::Tensor& scores, double tau, int iters,
                    std::span<const std::uint8_t> mask);

ad::Tensor gs_forward(const ad::Tensor& h_emb, const ad::Tensor& times,
                      const AttackParams& params, const AttackConfig& cfg,
                      std::span<const std::uint8_t> mask);

struct SoftSequence {
  ad::Tensor times;  // [n] = P t
  ad::Tensor marks;  // [n, C+1] = P C
};

SoftSequence apply_soft_perm(const ad::Tensor& p, const EventTensors& ev);

// Per-position time noise, [n]; zero on padding.
ad::Tensor eps_forward(const SoftSequence& hp, std::span<const std::uint8_t> mask,
                       const AttackParams& params);

// Negative log-likelihood of the clean events when event i is conditioned on
// the embedding of the first i-1 perturbed events (t', C'), and the survival
// term runs from t'_{i-1} (signed when t'_{i-1} > t_i).
ad::Tensor adv_nll(const EventTensors& clean, std::span<const int> clean_marks,
                   const ad::Tensor& pert_times, const ad::Tensor& pert_marks,
                   const MtppParams& model, const LikelihoodOptions& opts = {});

// sum_i |t'_i - t_i| + rho_c (1 - mark_prob_i) over real positions.
ad::Tensor distance_soft(const ad::Tensor& clean_times,
                         const ad::Tensor& pert_times,
                         const ad::Tensor& mark_prob,
                         std::span<const std::uint8_t> mask, double rho_c);

// sum_i relu(A eps - B P t)_i.
ad::Tensor hinge_penalty(const ad::Tensor& p, const ad::Tensor& eps,
                         const ad::Tensor& times, const ConstraintSystem& sys);

// Every intermediate of one attack evaluation.
struct AttackForward {
  ad::Tensor p;
  SoftSequence soft;
  ad::Tensor eps;
  ad::Tensor pert_times;
  ad::Tensor nll;
  ad::Tensor distance;
  ad::Tensor hinge;
  ad::Tensor loss;  // -nll + rho_d distance + rho_ab hinge
};

AttackForward attack_forward(const EventTensors& clean,
                             std::span<const int> clean_marks,
                             const AttackParams& attack,
                             const MtppParams& model, const AttackConfig& cfg);

ad::Tensor attack_loss(const Sequence& clean, const AttackParams& attack,
                       const MtppParams& model, const AttackConfig& cfg);

// Greedy rounding: rows in order take their largest unused column, ties to
// the smaller index. perm[i] is the column chosen by row i.
std::vector<std::size_t> harden(const ad::Tensor& p);

struct Emitted {
  Sequence sequence;
  std::vector<std::size_t> perm;  // original index of each emitted event
  double distance = 0.0;          // hard distance to the clean sequence
  double hinge = 0.0;             // chronology violation before the final sort
};

// Applies a hard permutation (perm[i] = source event of position i), adds
// eps evaluated on the permuted sequence, and sorts so the result is valid.
Emitted emit_permuted(const Sequence& clean, std::span<const std::size_t> perm,
                      const AttackParams& attack, const MtppParams& model,
                      const AttackConfig& cfg);

// Hardens P, applies it to the clean events, adds eps evaluated on the
// hard-permuted sequence, and sorts so the result is always valid.
Emitted emit_adversarial(const Sequence& clean, const AttackParams& attack,
                         const MtppParams& model, const AttackConfig& cfg);

void save_attack(const AttackParams& params, const std::filesystem::path& path);
AttackParams load_attack(const std::filesystem::path& path);

}  // namespace advtpp

#endif  // ADVTPP_PERMATTACK_HPP_
