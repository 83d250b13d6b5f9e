#include "advtpp/mtpp.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "advtpp/errors.hpp"

namespace advtpp {

namespace {

constexpr double kMaskedScore = -1e9;

double softplus(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

ad::Tensor mask_tensor(std::span<const std::uint8_t> mask) {
  std::vector<double> v(mask.begin(), mask.end());
  return ad::Tensor::vector(std::move(v));
}

bool has_padding(std::span<const std::uint8_t> mask) {
  return std::find(mask.begin(), mask.end(), 0) != mask.end();
}

}  // namespace

// ------------------------------------------------------------ parameters

MtppParams MtppParams::zeros(int num_marks, int dim) {
  if (num_marks < 1 || dim < 2) {
    throw ConfigError("mtpp: need num_marks >= 1 and dim >= 2");
  }
  const auto c = static_cast<std::size_t>(num_marks);
  const auto d = static_cast<std::size_t>(dim);
  MtppParams p;
  p.num_marks = num_marks;
  p.dim = dim;
  p.mark_embed = ad::Tensor::zeros({c + 1, d});
  p.time_weight = ad::Tensor::zeros({d});
  p.enc_q = ad::Tensor::zeros({d, d});
  p.enc_k = ad::Tensor::zeros({d, d});
  p.enc_v = ad::Tensor::zeros({d, d});
  p.ffn_w = ad::Tensor::zeros({d, d});
  p.ffn_b = ad::Tensor::zeros({d});
  p.h0 = ad::Tensor::zeros({d});
  p.lambda_v = ad::Tensor::zeros({d});
  p.lambda_w = ad::Tensor::scalar(0.0);
  p.lambda_b = ad::Tensor::scalar(0.0);
  p.mark_w = ad::Tensor::zeros({c, d});
  p.mark_b = ad::Tensor::zeros({c});
  return p;
}

MtppParams MtppParams::random(int num_marks, int dim, std::uint64_t seed) {
  MtppParams p = zeros(num_marks, dim);
  Initializer init(seed);
  const double s = 1.0 / std::sqrt(static_cast<double>(dim));
  p.mark_embed = init.normal(p.mark_embed.shape(), 1.0);
  p.time_weight = init.normal(p.time_weight.shape(), 0.5);
  p.enc_q = init.normal(p.enc_q.shape(), s);
  p.enc_k = init.normal(p.enc_k.shape(), s);
  p.enc_v = init.normal(p.enc_v.shape(), s);
  p.ffn_w = init.normal(p.ffn_w.shape(), s);
  p.h0 = init.normal(p.h0.shape(), 0.1);
  p.lambda_v = init.normal(p.lambda_v.shape(), 0.1);
  p.mark_w = init.normal(p.mark_w.shape(), 0.1);
  return p;
}

void MtppParams::validate() const {
  if (dim < 2) throw ConfigError("mtpp: dim must be >= 2");
  visit([](const std::string& name, const ad::Tensor& t) {
    for (double x : t.values()) {
      if (!std::isfinite(x)) throw NumericError("mtpp: non-finite " + name);
    }
  });
}

// --------------------------------------------------------------- tensors

std::size_t EventTensors::real_length() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1));
}

ad::Tensor one_hot(std::span<const int> marks, int num_marks) {
  const auto width = static_cast<std::size_t>(num_marks) + 1;
  std::vector<double> v(marks.size() * width, 0.0);
  for (std::size_t i = 0; i < marks.size(); ++i) {
    if (marks[i] < 0 || marks[i] > num_marks) {
      throw DataError("mark " + std::to_string(marks[i]) + " out of range");
    }
    v[i * width + static_cast<std::size_t>(marks[i])] = 1.0;
  }
  return ad::Tensor({marks.size(), width}, std::move(v));
}

EventTensors to_tensors(const Sequence& seq, int num_marks) {
  const auto marks = seq.marks();
  return {ad::Tensor::vector(seq.times()), one_hot(marks, num_marks),
          std::vector<std::uint8_t>(seq.size(), 1)};
}

EventTensors to_tensors(const PaddedBatch& batch, std::size_t row) {
  return {ad::Tensor::vector(batch.times[row]),
          one_hot(batch.marks[row], batch.num_marks), batch.mask[row]};
}

ad::Tensor time_encoding(const ad::Tensor& times, int dim) {
  const auto d = static_cast<std::size_t>(dim);
  const std::size_t n = times.size();
  std::vector<double> freq(d);
  std::vector<double> phase(n * d);
  for (std::size_t k = 0; k < d; ++k) {
    freq[k] = std::pow(10000.0, -2.0 * static_cast<double>(k / 2) /
                                    static_cast<double>(d));
    for (std::size_t i = 0; i < n; ++i) phase[i * d + k] = (k % 2) ? M_PI / 2 : 0.0;
  }
  ad::Tensor angles = ad::matmul(ad::reshape(times, {n, 1}),
                                 ad::Tensor::matrix(1, d, std::move(freq)));
  return ad::sin(angles + ad::Tensor({n, d}, std::move(phase)));
}

ad::Tensor causal_attention(const ad::Tensor& z, const ad::Tensor& wq,
                            const ad::Tensor& wk, const ad::Tensor& wv,
                            std::span<const std::uint8_t> mask) {
  const std::size_t n = z.rows();
  const double d = static_cast<double>(z.cols());
  std::vector<double> bias(n * n, kMaskedScore);
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) {
      bias[i * n + i] = 0.0;
      continue;
    }
    for (std::size_t j = 0; j <= i; ++j) {
      if (mask[j]) bias[i * n + j] = 0.0;
    }
  }
  ad::Tensor q = ad::matmul(z, wq);
  ad::Tensor k = ad::matmul(z, wk);
  ad::Tensor v = ad::matmul(z, wv);
  ad::Tensor scores = ad::scale(ad::matmul(q, ad::transpose(k)),
                                1.0 / std::sqrt(d)) +
                      ad::Tensor({n, n}, std::move(bias));
  return ad::matmul(ad::softmax(scores, 1), v);
}

ad::Tensor encode(const EventTensors& ev, const MtppParams& params) {
  const std::size_t n = ev.size();
  if (n == 0) throw DataError("encode: empty sequence");
  ad::Tensor z = ad::matmul(ev.marks, params.mark_embed) +
                 ad::repeat_rows(params.time_weight, n) *
                     time_encoding(ev.times, params.dim);
  ad::Tensor a = causal_attention(z, params.enc_q, params.enc_k, params.enc_v,
                                  ev.mask);
  ad::Tensor h = ad::tanh(ad::matmul(a, params.ffn_w) +
                          ad::repeat_rows(params.ffn_b, n));
  if (has_padding(ev.mask)) {
    h = h * ad::repeat_cols(mask_tensor(ev.mask),
                            static_cast<std::size_t>(params.dim));
  }
  return h;
}

ad::Tensor shift_history(const ad::Tensor& h, const MtppParams& params) {
  const std::size_t n = h.rows();
  ad::Tensor first = ad::reshape(params.h0, {1, h.cols()});
  if (n == 1) return first;
  return ad::concat({first, ad::slice(h, 0, 0, n - 1)}, 0);
}

ad::Tensor previous_times(const ad::Tensor& times) {
  const std::size_t n = times.size();
  if (n == 1) return ad::Tensor::vector({0.0});
  return ad::concat({ad::Tensor::vector({0.0}), ad::slice(times, 0, 0, n - 1)},
                    0);
}

double intensity(std::span<const double> h_i, double t, double t_i,
                 const MtppParams& params) {
  if (t < t_i) {
    throw DomainError("intensity: query time precedes the last event");
  }
  return softplus(dot(params.lambda_v.values(), h_i) +
                  params.lambda_w.item() * (t - t_i) + params.lambda_b.item());
}

ad::Tensor mark_logits(const ad::Tensor& h, const MtppParams& params) {
  return ad::matmul(h, ad::transpose(params.mark_w)) +
         ad::repeat_rows(params.mark_b, h.rows());
}

std::vector<double> mark_distribution(std::span<const double> h_i,
                                      const MtppParams& params) {
  const auto c = static_cast<std::size_t>(params.num_marks);
  const auto d = static_cast<std::size_t>(params.dim);
  std::vector<double> logits(c);
  for (std::size_t k = 0; k < c; ++k) {
    logits[k] = params.mark_b[k] +
                dot(params.mark_w.values().subspan(k * d, d), h_i);
  }
  const double m = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (double& x : logits) {
    x = std::exp(x - m);
    s += x;
  }
  for (double& x : logits) x /= s;
  return logits;
}

// ------------------------------------------------------------ likelihood

namespace {

ad::Tensor target_mark_logp(const ad::Tensor& h_prev,
                            std::span<const int> target_marks,
                            const MtppParams& params) {
  const std::size_t n = h_prev.rows();
  const auto c = static_cast<std::size_t>(params.num_marks);
  std::vector<double> pick(n * c, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const int m = target_marks[i];
    if (m >= 0 && m < params.num_marks) pick[i * c + static_cast<std::size_t>(m)] = 1.0;
  }
  ad::Tensor logp = ad::log_softmax(mark_logits(h_prev, params), 1);
  return ad::sum(logp * ad::Tensor({n, c}, std::move(pick)), 1);
}

}  // namespace

ad::Tensor target_mark_prob(const ad::Tensor& h_prev,
                            std::span<const int> target_marks,
                            const MtppParams& params) {
  return ad::exp(target_mark_logp(h_prev, target_marks, params));
}

ad::Tensor conditional_loglik(const ad::Tensor& h_prev,
                              const ad::Tensor& prev_times,
                              const ad::Tensor& target_times,
                              std::span<const int> target_marks,
                              std::span<const std::uint8_t> mask,
                              const MtppParams& params,
                              const LikelihoodOptions& opts) {
  const std::size_t n = h_prev.rows();
  if (prev_times.size() != n || target_times.size() != n ||
      target_marks.size() != n || mask.size() != n) {
    throw ShapeError("conditional_loglik: inputs disagree on length");
  }
  if (opts.k_int < 2) throw ConfigError("k_int must be at least 2");
  const auto k = static_cast<std::size_t>(opts.k_int);

  std::vector<double> grid(k);
  std::vector<double> trap(k, 1.0 / static_cast<double>(k - 1));
  for (std::size_t j = 0; j < k; ++j) {
    grid[j] = static_cast<double>(j) / static_cast<double>(k - 1);
  }
  trap.front() *= 0.5;
  trap.back() *= 0.5;

  ad::Tensor elapsed = target_times - prev_times;  // signed
  ad::Tensor base = ad::matmul(h_prev, params.lambda_v);
  // Intensity along each interval at fractions grid[j] of the elapsed time.
  ad::Tensor along = ad::repeat_cols(base, k) +
                     params.lambda_w *
                         ad::matmul(ad::reshape(elapsed, {n, 1}),
                                    ad::Tensor::matrix(1, k, std::move(grid))) +
                     params.lambda_b;
  ad::Tensor lam = ad::softplus(along);
  ad::Tensor integral =
      ad::matmul(lam, ad::Tensor::vector(std::move(trap))) * elapsed;
  ad::Tensor lam_end =
      ad::softplus(base + params.lambda_w * elapsed + params.lambda_b);
  ad::Tensor terms = ad::log(lam_end) - integral +
                     target_mark_logp(h_prev, target_marks, params);
  if (has_padding(mask)) terms = terms * mask_tensor(mask);
  return ad::sum(terms);
}

ad::Tensor nll_clean(const EventTensors& ev, std::span<const int> marks,
                     const MtppParams& params, const LikelihoodOptions& opts) {
  ad::Tensor h = encode(ev, params);
  return ad::neg(conditional_loglik(shift_history(h, params),
                                    previous_times(ev.times), ev.times, marks,
                                    ev.mask, params, opts));
}

ad::Tensor nll_clean(const Sequence& seq, const MtppParams& params,
                     const LikelihoodOptions& opts) {
  const auto marks = seq.marks();
  return nll_clean(to_tensors(seq, params.num_marks), marks, params, opts);
}

// ------------------------------------------------------------ prediction

Prediction predict_next(std::span<const double> h_i, double t_i,
                        const MtppParams& params, const PredictOptions& opts) {
  if (opts.k_pred < 2 || !(opts.horizon > 0)) {
    throw ConfigError("predict_next: need k_pred >= 2 and horizon > 0");
  }
  const auto k = static_cast<std::size_t>(opts.k_pred);
  const double a = dot(params.lambda_v.values(), h_i) + params.lambda_b.item();
  const double w = params.lambda_w.item();
  const double step = opts.horizon / static_cast<double>(k - 1);
  // E[s] = int_0^T S(s) ds + S(T) / lambda(T), S the survival function;
  // equal to int_0^T s f(s) ds plus the mass beyond T at an exponential tail.
  double cum = 0.0;
  double surv_prev = 1.0;
  double lam_prev = softplus(a);
  double mean = 0.0;
  for (std::size_t j = 1; j < k; ++j) {
    const double s = static_cast<double>(j) * step;
    const double lam = softplus(a + w * s);
    cum += 0.5 * (lam + lam_prev) * step;
    const double surv = std::exp(-cum);
    mean += 0.5 * (surv + surv_prev) * step;
    surv_prev = surv;
    lam_prev = lam;
  }
  mean += surv_prev / std::max(lam_prev, 1e-300);
  Prediction p;
  p.time = t_i + mean;
  p.truncated = surv_prev > 0.01;
  const auto dist = mark_distribution(h_i, params);
  p.mark = static_cast<int>(
      std::max_element(dist.begin(), dist.end()) - dist.begin());
  return p;
}

PredictOptions default_predict_options(const Dataset& ds) {
  PredictOptions o;
  o.horizon = 10.0 * mean_inter_event_time(ds);
  return o;
}

void SequenceScore::add(double t_true, int c_true, double t_pred, int c_pred) {
  abs_err_sum += std::fabs(t_true - t_pred);
  correct += (c_true == c_pred) ? 1 : 0;
  ++count;
}

Metrics SequenceScore::metrics() const {
  if (count == 0) return {};
  const double n = static_cast<double>(count);
  return {abs_err_sum / n, static_cast<double>(correct) / n};
}

SequenceScore score_sequence(const Sequence& target, const Sequence& history,
                             const MtppParams& params,
                             const PredictOptions& opts) {
  if (target.size() != history.size()) {
    throw DataError("score_sequence: history length differs from target");
  }
  SequenceScore score;
  if (target.size() < 2) return score;
  const ad::Tensor h = encode(to_tensors(history, params.num_marks), params);
  const auto d = static_cast<std::size_t>(params.dim);
  for (std::size_t i = 1; i < target.size(); ++i) {
    const Prediction p = predict_next(h.values().subspan((i - 1) * d, d),
                                      history[i - 1].t, params, opts);
    score.add(target[i].t, target[i].c, p.time, p.mark);
  }
  return score;
}

Metrics metrics(const Dataset& ds, const MtppParams& params,
                const PredictOptions& opts,
                std::span<const Sequence> histories) {
  if (!histories.empty() && histories.size() != ds.sequences.size()) {
    throw DataError("metrics: histories must align with the dataset");
  }
  Metrics total;
  std::size_t used = 0;
  for (std::size_t s = 0; s < ds.sequences.size(); ++s) {
    const Sequence& target = ds.sequences[s];
    const Sequence& hist = histories.empty() ? target : histories[s];
    const SequenceScore sc = score_sequence(target, hist, params, opts);
    if (sc.count == 0) continue;
    const Metrics m = sc.metrics();
    total.mae += m.mae;
    total.mpa += m.mpa;
    ++used;
  }
  if (used) {
    total.mae /= static_cast<double>(used);
    total.mpa /= static_cast<double>(used);
  }
  return total;
}

// -------------------------------------------------------------- training

double mean_nll(const Dataset& ds, const MtppParams& params,
                const LikelihoodOptions& opts) {
  if (ds.sequences.empty()) return 0.0;
  double total = 0.0;
  for (const Sequence& s : ds.sequences) total += nll_clean(s, params, opts).item();
  return total / static_cast<double>(ds.sequences.size());
}

GradList nll_gradient(std::span<const Sequence> batch, const MtppParams& params,
                      const LikelihoodOptions& opts, double* loss_out) {
  GradList grads = zero_grads(params);
  double loss = 0.0;
  const double w = 1.0 / static_cast<double>(batch.size());
  for (const Sequence& seq : batch) {
    ad::Tape tape;
    MtppParams bound = bind(params, tape);
    ad::Tensor nll = nll_clean(seq, bound, opts);
    loss += w * nll.item();
    accumulate(grads, collect_grads(bound, tape.backward(nll)), w);
  }
  if (loss_out) *loss_out = loss;
  return grads;
}

TrainResult train_mle(const Dataset& train, const Dataset& val,
                      MtppParams params, const TrainConfig& cfg) {
  if (train.sequences.empty()) throw ConfigError("train_mle: empty training set");
  if (cfg.batch_size < 1 || cfg.epochs < 0) {
    throw ConfigError("train_mle: batch_size >= 1 and epochs >= 0 required");
  }
  TrainResult res;
  const Dataset& monitor = val.sequences.empty() ? train : val;
  res.val_loss.push_back(mean_nll(monitor, params, cfg.lik));
  Adam adam(cfg.adam);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train.sequences.size());
  std::iota(order.begin(), order.end(), 0);
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      std::vector<Sequence> batch;
      for (std::size_t j = start; j < std::min(order.size(), start + bs); ++j) {
        batch.push_back(train.sequences[order[j]]);
      }
      double loss = 0.0;
      GradList g = nll_gradient(batch, params, cfg.lik, &loss);
      if (!std::isfinite(loss) || !all_finite(g)) {
        throw NumericError("train_mle: non-finite loss at epoch " +
                           std::to_string(epoch) + " (last finite train loss " +
                           (res.train_loss.empty()
                                ? std::string("n/a")
                                : std::to_string(res.train_loss.back())) +
                           ")");
      }
      adam.step(params, std::move(g));
      epoch_loss += loss;
      ++batches;
    }
    res.train_loss.push_back(epoch_loss / static_cast<double>(batches));
    res.val_loss.push_back(mean_nll(monitor, params, cfg.lik));
  }
  res.params = std::move(params);
  return res;
}

void save_mtpp(const MtppParams& params, const std::filesystem::path& path) {
  save_checkpoint(to_checkpoint(params, "mtpp",
                                {{"num_marks", params.num_marks},
                                 {"dim", params.dim}}),
                  path);
}

MtppParams load_mtpp(const std::filesystem::path& path) {
  RawCheckpoint c = load_checkpoint(path, "mtpp");
  if (!c.meta.count("num_marks") || !c.meta.count("dim")) {
    throw DataError(path.string() + ": checkpoint meta lacks num_marks/dim");
  }
  MtppParams p = MtppParams::zeros(static_cast<int>(c.meta["num_marks"]),
                                   static_cast<int>(c.meta["dim"]));
  fill_from_checkpoint(p, c);
  p.validate();
  return p;
}

}  // namespace advtpp
