#include "advtpp/permattack.hpp"

#include <algorithm>
#include <cmath>

#include "advtpp/errors.hpp"
#include "advtpp/params.hpp"

namespace advtpp {

namespace {

constexpr double kMaskedScore = -1e9;
constexpr double kPairBias = 1.0;
constexpr double kPairScale = 30.0;

ad::Tensor mask_tensor(std::span<const std::uint8_t> mask) {
  return ad::Tensor::vector(std::vector<double>(mask.begin(), mask.end()));
}

bool has_padding(std::span<const std::uint8_t> mask) {
  return std::find(mask.begin(), mask.end(), 0) != mask.end();
}

// log sum_j exp(x) along axis; the shift is a constant, so it carries no
// gradient of its own.
ad::Tensor logsumexp(const ad::Tensor& x, std::size_t axis) {
  const std::size_t m = axis == 0 ? x.rows() : x.cols();
  ad::Tensor shift = ad::max(x, axis).detach();
  ad::Tensor spread =
      axis == 0 ? ad::repeat_rows(shift, m) : ad::repeat_cols(shift, m);
  return shift + ad::log(ad::sum(ad::exp(x - spread), axis));
}

}  // namespace

void AttackConfig::validate() const {
  if (!(tau > 0)) throw ConfigError("attack: tau must be > 0");
  if (sinkhorn_iters < 1) throw ConfigError("attack: sinkhorn_iters must be >= 1");
  if (rho_d < 0 || rho_ab < 0 || rho_c < 0) {
    throw ConfigError("attack: penalty weights must be >= 0");
  }
  if (lik.k_int < 2) throw ConfigError("attack: k_int must be >= 2");
}

AttackParams AttackParams::zeros(int num_marks, int model_dim, int dim,
                                 int hidden, int time_dim) {
  if (num_marks < 1 || model_dim < 1 || dim < 2 || hidden < 1 ||
      time_dim < 0 || time_dim % 2) {
    throw ConfigError("attack: invalid dimensions");
  }
  const auto c = static_cast<std::size_t>(num_marks);
  const auto d = static_cast<std::size_t>(dim);
  const auto hd = static_cast<std::size_t>(hidden);
  AttackParams p;
  p.num_marks = num_marks;
  p.model_dim = model_dim;
  p.dim = dim;
  p.hidden = hidden;
  p.time_dim = time_dim;
  p.gs_w1 = ad::Tensor::zeros({2 * p.feature_dim(), hd});
  p.gs_b1 = ad::Tensor::zeros({hd});
  p.gs_w2 = ad::Tensor::zeros({hd});
  p.gs_b2 = ad::Tensor::scalar(0.0);
  p.noise_wc = ad::Tensor::zeros({c + 1, d});
  p.noise_wt = ad::Tensor::zeros({d});
  p.attn_q = ad::Tensor::zeros({d, d});
  p.attn_k = ad::Tensor::zeros({d, d});
  p.attn_v = ad::Tensor::zeros({d, d});
  p.out_w = ad::Tensor::zeros({d});
  p.out_b = ad::Tensor::scalar(0.0);
  return p;
}

AttackParams AttackParams::random(int num_marks, int model_dim, int dim,
                                  int hidden, int time_dim, std::uint64_t seed) {
  AttackParams p = zeros(num_marks, model_dim, dim, hidden, time_dim);
  Initializer init(seed);
  const double s = 1.0 / std::sqrt(static_cast<double>(dim));
  // Hidden units come in pairs tanh(c + r.(x_i - x_j)) + tanh(c - r.(x_i - x_j)),
  // which peak at x_i == x_j, so the initial P leans towards the identity.
  const std::size_t md = p.feature_dim();
  const auto hd = static_cast<std::size_t>(hidden);
  const ad::Tensor dirs = init.normal({md, hd}, 1.0);
  std::vector<double> w1(2 * md * hd, 0.0);
  std::vector<double> b1(hd, 0.0);
  std::vector<double> w2(hd, 0.0);
  for (std::size_t u = 0; u + 1 < hd; u += 2) {
    for (std::size_t k = 0; k < md; ++k) {
      const double r = dirs.at(k, u);
      w1[k * hd + u] = r;
      w1[(md + k) * hd + u] = -r;
      w1[k * hd + u + 1] = -r;
      w1[(md + k) * hd + u + 1] = r;
    }
    b1[u] = b1[u + 1] = kPairBias;
    w2[u] = w2[u + 1] = kPairScale / static_cast<double>(hd / 2);
  }
  p.gs_w1 = ad::Tensor({2 * md, hd}, std::move(w1)) +
            init.normal(p.gs_w1.shape(), 0.01);
  p.gs_b1 = ad::Tensor::vector(std::move(b1));
  p.gs_w2 = ad::Tensor::vector(std::move(w2));
  p.noise_wc = init.normal(p.noise_wc.shape(), 0.5);
  p.noise_wt = init.normal(p.noise_wt.shape(), 0.1);
  p.attn_q = init.normal(p.attn_q.shape(), s);
  p.attn_k = init.normal(p.attn_k.shape(), s);
  p.attn_v = init.normal(p.attn_v.shape(), s);
  p.out_w = init.normal(p.out_w.shape(), 0.01);
  return p;
}

ConstraintSystem constraint_system(std::size_t n, std::size_t real_length) {
  if (real_length == 0 || real_length > n) {
    throw ShapeError("constraint_system: real length must be in [1, n]");
  }
  std::vector<double> a(n * n, 0.0);
  std::vector<double> b(n * n, 0.0);
  const std::size_t m = real_length;
  for (std::size_t i = 0; i + 1 < m; ++i) {
    a[i * n + i] = 1.0;
    a[i * n + i + 1] = -1.0;
    b[i * n + i] = -1.0;
    b[i * n + i + 1] = 1.0;
  }
  a[(m - 1) * n] = -1.0;
  b[(m - 1) * n] = 1.0;
  return {ad::Tensor({n, n}, std::move(a)), ad::Tensor({n, n}, std::move(b))};
}

ad::Tensor pair_features(const ad::Tensor& h_emb, const ad::Tensor& times,
                         const AttackParams& params) {
  if (h_emb.cols() != static_cast<std::size_t>(params.model_dim)) {
    throw ShapeError("pair_features: embedding width " +
                     std::to_string(h_emb.cols()) + " != model_dim " +
                     std::to_string(params.model_dim));
  }
  if (params.time_dim == 0) return h_emb;
  return ad::concat({h_emb, time_encoding(times, params.time_dim)}, 1);
}

ad::Tensor pair_scores(const ad::Tensor& features, const AttackParams& params) {
  const std::size_t n = features.rows();
  const std::size_t d = features.cols();
  if (d != params.feature_dim()) {
    throw ShapeError("pair_scores: feature width " + std::to_string(d) +
                     " != " + std::to_string(params.feature_dim()));
  }
  ad::Tensor u = ad::matmul(features, ad::slice(params.gs_w1, 0, 0, d));
  ad::Tensor v = ad::matmul(features, ad::slice(params.gs_w1, 0, d, 2 * d));
  std::vector<std::size_t> rows(n * n);
  std::vector<std::size_t> cols(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      rows[i * n + j] = i;
      cols[i * n + j] = j;
    }
  }
  ad::Tensor hidden = ad::tanh(ad::gather_rows(u, rows) +
                               ad::gather_rows(v, cols) +
                               ad::repeat_rows(params.gs_b1, n * n));
  return ad::reshape(ad::matmul(hidden, params.gs_w2), {n, n}) + params.gs_b2;
}

ad::Tensor sinkhorn(const ad::Tensor& scores, double tau, int iters,
                    std::span<const std::uint8_t> mask) {
  if (!(tau > 0)) throw DomainError("sinkhorn: tau must be > 0");
  if (iters < 1) throw ConfigError("sinkhorn: iters must be >= 1");
  const std::size_t n = scores.rows();
  if (scores.cols() != n || mask.size() != n) {
    throw ShapeError("sinkhorn: scores must be [n, n] with an n-entry mask");
  }
  ad::Tensor x = ad::scale(scores, 1.0 / tau);
  if (has_padding(mask)) {
    std::vector<double> pin(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if ((!mask[i] || !mask[j]) && i != j) pin[i * n + j] = kMaskedScore;
      }
    }
    x = x + ad::Tensor({n, n}, std::move(pin));
  }
  for (int l = 0; l < iters; ++l) {
    x = x - ad::repeat_cols(logsumexp(x, 1), n);
    x = x - ad::repeat_rows(logsumexp(x, 0), n);
  }
  return ad::exp(x);
}

ad::Tensor gs_forward(const ad::Tensor& h_emb, const ad::Tensor& times,
                      const AttackParams& params, const AttackConfig& cfg,
                      std::span<const std::uint8_t> mask) {
  return sinkhorn(pair_scores(pair_features(h_emb, times, params), params),
                  cfg.tau, cfg.sinkhorn_iters, mask);
}

SoftSequence apply_soft_perm(const ad::Tensor& p, const EventTensors& ev) {
  return {ad::matmul(p, ev.times), ad::matmul(p, ev.marks)};
}

ad::Tensor eps_forward(const SoftSequence& hp, std::span<const std::uint8_t> mask,
                       const AttackParams& params) {
  const std::size_t n = hp.times.size();
  const auto d = static_cast<std::size_t>(params.dim);
  ad::Tensor z = ad::matmul(hp.marks, params.noise_wc) +
                 ad::matmul(ad::reshape(hp.times, {n, 1}),
                            ad::reshape(params.noise_wt, {1, d})) +
                 time_encoding(hp.times, params.dim);
  ad::Tensor s = ad::tanh(causal_attention(z, params.attn_q, params.attn_k,
                                           params.attn_v, mask));
  ad::Tensor eps = ad::matmul(s, params.out_w) + params.out_b;
  if (has_padding(mask)) eps = eps * mask_tensor(mask);
  return eps;
}

namespace {

struct AdvTerms {
  ad::Tensor nll;
  ad::Tensor mark_prob;
};

AdvTerms adv_terms(const EventTensors& clean, std::span<const int> clean_marks,
                   const ad::Tensor& pert_times, const ad::Tensor& pert_marks,
                   const MtppParams& model, const LikelihoodOptions& opts) {
  const ad::Tensor h = encode({pert_times, pert_marks, clean.mask}, model);
  const ad::Tensor hp = shift_history(h, model);
  ad::Tensor ll = conditional_loglik(hp, previous_times(pert_times),
                                     clean.times, clean_marks, clean.mask,
                                     model, opts);
  return {ad::neg(ll), target_mark_prob(hp, clean_marks, model)};
}

}  // namespace

ad::Tensor adv_nll(const EventTensors& clean, std::span<const int> clean_marks,
                   const ad::Tensor& pert_times, const ad::Tensor& pert_marks,
                   const MtppParams& model, const LikelihoodOptions& opts) {
  return adv_terms(clean, clean_marks, pert_times, pert_marks, model, opts).nll;
}

ad::Tensor distance_soft(const ad::Tensor& clean_times,
                         const ad::Tensor& pert_times,
                         const ad::Tensor& mark_prob,
                         std::span<const std::uint8_t> mask, double rho_c) {
  ad::Tensor terms = ad::abs(pert_times - clean_times) +
                     rho_c * (ad::neg(mark_prob) + 1.0);
  if (has_padding(mask)) terms = terms * mask_tensor(mask);
  return ad::sum(terms);
}

ad::Tensor hinge_penalty(const ad::Tensor& p, const ad::Tensor& eps,
                         const ad::Tensor& times, const ConstraintSystem& sys) {
  return ad::sum(ad::relu(ad::matmul(sys.a, eps) -
                          ad::matmul(sys.b, ad::matmul(p, times))));
}

AttackForward attack_forward(const EventTensors& clean,
                             std::span<const int> clean_marks,
                             const AttackParams& attack,
                             const MtppParams& model, const AttackConfig& cfg) {
  const std::size_t n = clean.size();
  AttackForward f;
  const ad::Tensor h_emb = encode(clean, model);
  f.p = gs_forward(h_emb, clean.times, attack, cfg, clean.mask);
  f.soft = apply_soft_perm(f.p, clean);
  f.eps = eps_forward(f.soft, clean.mask, attack);
  f.pert_times = f.soft.times + f.eps;
  AdvTerms adv = adv_terms(clean, clean_marks, f.pert_times, f.soft.marks,
                           model, cfg.lik);
  f.nll = adv.nll;
  f.distance = distance_soft(clean.times, f.pert_times, adv.mark_prob,
                             clean.mask, cfg.rho_c);
  f.hinge = hinge_penalty(f.p, f.eps, clean.times,
                          constraint_system(n, clean.real_length()));
  f.loss = ad::neg(f.nll) + cfg.rho_d * f.distance + cfg.rho_ab * f.hinge;
  return f;
}

ad::Tensor attack_loss(const Sequence& clean, const AttackParams& attack,
                       const MtppParams& model, const AttackConfig& cfg) {
  const auto marks = clean.marks();
  return attack_forward(to_tensors(clean, model.num_marks), marks, attack,
                        model, cfg)
      .loss;
}

std::vector<std::size_t> harden(const ad::Tensor& p) {
  const std::size_t n = p.rows();
  if (p.cols() != n) throw ShapeError("harden: matrix must be square");
  std::vector<std::size_t> perm(n);
  std::vector<bool> used(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = n;
    for (std::size_t j = 0; j < n; ++j) {
      if (used[j]) continue;
      if (best == n || p.at(i, j) > p.at(i, best)) best = j;
    }
    perm[i] = best;
    used[best] = true;
  }
  return perm;
}

Emitted emit_permuted(const Sequence& clean, std::span<const std::size_t> perm,
                      const AttackParams& attack, const MtppParams& model,
                      const AttackConfig& cfg) {
  const std::size_t n = clean.size();
  if (perm.size() != n) throw ShapeError("emit_permuted: perm length differs");
  std::vector<double> hard(n * n, 0.0);
  std::vector<bool> seen(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    if (perm[i] >= n || seen[perm[i]]) {
      throw DataError("emit_permuted: not a permutation");
    }
    seen[perm[i]] = true;
    hard[i * n + perm[i]] = 1.0;
  }
  const ad::Tensor p({n, n}, std::move(hard));
  const EventTensors ev = to_tensors(clean, model.num_marks);
  const ad::Tensor eps = eps_forward(apply_soft_perm(p, ev), ev.mask, attack);

  Emitted out{clean, {}, 0.0, 0.0};
  out.hinge = hinge_penalty(p, eps, ev.times, constraint_system(n, n)).item();
  // Position i carries event perm[i] at time t_perm[i] + eps_i, so the noise
  // attaches to the original event perm[i].
  std::vector<double> noise(n);
  for (std::size_t i = 0; i < n; ++i) noise[perm[i]] = eps[i];
  NoisedSequence ns = apply_noise_and_sort(clean, noise);
  out.sequence = std::move(ns.sequence);
  out.perm = std::move(ns.perm);
  out.distance = distance_hard(clean, out.sequence, {cfg.rho_c});
  return out;
}

Emitted emit_adversarial(const Sequence& clean, const AttackParams& attack,
                         const MtppParams& model, const AttackConfig& cfg) {
  const EventTensors ev = to_tensors(clean, model.num_marks);
  const ad::Tensor p =
      gs_forward(encode(ev, model), ev.times, attack, cfg, ev.mask);
  return emit_permuted(clean, harden(p), attack, model, cfg);
}

void save_attack(const AttackParams& params, const std::filesystem::path& path) {
  save_checkpoint(to_checkpoint(params, "attack",
                                {{"num_marks", params.num_marks},
                                 {"model_dim", params.model_dim},
                                 {"dim", params.dim},
                                 {"hidden", params.hidden},
                                 {"time_dim", params.time_dim}}),
                  path);
}

AttackParams load_attack(const std::filesystem::path& path) {
  RawCheckpoint c = load_checkpoint(path, "attack");
  for (const char* key :
       {"num_marks", "model_dim", "dim", "hidden", "time_dim"}) {
    if (!c.meta.count(key)) {
      throw DataError(path.string() + ": checkpoint meta lacks " + key);
    }
  }
  AttackParams p = AttackParams::zeros(
      static_cast<int>(c.meta["num_marks"]), static_cast<int>(c.meta["model_dim"]),
      static_cast<int>(c.meta["dim"]), static_cast<int>(c.meta["hidden"]),
      static_cast<int>(c.meta["time_dim"]));
  fill_from_checkpoint(p, c);
  return p;
}

}  // namespace advtpp
