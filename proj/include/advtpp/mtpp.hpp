#ifndef ADVTPP_MTPP_HPP_
#define ADVTPP_MTPP_HPP_

// Neural marked temporal point process. A single causal self-attention layer
// with a position-wise feed-forward block summarizes events 1..i into h_i;
// the next event is modelled by
//   lambda(t | h_i) = softplus(v . h_i + w (t - t_i) + b)
//   m(c | h_i)      = softmax(W_m h_i + b_m)_c

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "advtpp/autodiff.hpp"
#include "advtpp/ctes.hpp"
#include "advtpp/params.hpp"

namespace advtpp {

struct MtppParams {
  int num_marks = 0;
  int dim = 0;

  ad::Tensor mark_embed;   // [C+1, D]; last row embeds the padding mark
  ad::Tensor time_weight;  // [D], scales the time encoding
  ad::Tensor enc_q;        // [D, D]
  ad::Tensor enc_k;        // [D, D]
  ad::Tensor enc_v;        // [D, D]
  ad::Tensor ffn_w;        // [D, D]
  ad::Tensor ffn_b;        // [D]
  ad::Tensor h0;           // [D], conditioning before the first event
  ad::Tensor lambda_v;     // [D]
  ad::Tensor lambda_w;     // [], slope on elapsed time
  ad::Tensor lambda_b;     // []
  ad::Tensor mark_w;       // [C, D]
  ad::Tensor mark_b;       // [C]

  static MtppParams zeros(int num_marks, int dim);
  static MtppParams random(int num_marks, int dim, std::uint64_t seed);

  template <class F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  void validate() const;

 private:
  template <class Self, class F>
  static void visit_impl(Self& s, F& f) {
    f("mark_embed", s.mark_embed);
    f("time_weight", s.time_weight);
    f("enc_q", s.enc_q);
    f("enc_k", s.enc_k);
    f("enc_v", s.enc_v);
    f("ffn_w", s.ffn_w);
    f("ffn_b", s.ffn_b);
    f("h0", s.h0);
    f("lambda_v", s.lambda_v);
    f("lambda_w", s.lambda_w);
    f("lambda_b", s.lambda_b);
    f("mark_w", s.mark_w);
    f("mark_b", s.mark_b);
  }
};

// Model-side view of a (possibly soft, possibly padded) event sequence.
struct EventTensors {
  ad::Tensor times;                 // [n]
  ad::Tensor marks;                 // [n, C+1], one-hot or convex mixtures
  std::vector<std::uint8_t> mask;   // 1 for real events, padding at the tail

  std::size_t size() const { return mask.size(); }
  std::size_t real_length() const;
};

EventTensors to_tensors(const Sequence& seq, int num_marks);
EventTensors to_tensors(const PaddedBatch& batch, std::size_t row);
// [n, C+1] one-hot matrix; mark num_marks is the padding column.
ad::Tensor one_hot(std::span<const int> marks, int num_marks);

// Sinusoidal continuous-time encoding, [n] -> [n, D]. Even columns carry
// sin(t w_k), odd columns cos(t w_k) with w_k = 10000^(-2 floor(k/2) / D).
ad::Tensor time_encoding(const ad::Tensor& times, int dim);

// Causal masked attention of queries over keys/values, scaled by 1/sqrt(D).
// Real row i attends to real j <= i; padded rows attend only to themselves.
ad::Tensor causal_attention(const ad::Tensor& z, const ad::Tensor& wq,
                            const ad::Tensor& wk, const ad::Tensor& wv,
                            std::span<const std::uint8_t> mask);

// History embeddings h, [n, D]; padded rows are zero.
ad::Tensor encode(const EventTensors& ev, const MtppParams& params);

// Rows h_{i-1} for i = 1..n: h0 followed by h[0..n-2].
ad::Tensor shift_history(const ad::Tensor& h, const MtppParams& params);

// Lower integration limits for each target: 0 followed by times[0..n-2].
ad::Tensor previous_times(const ad::Tensor& times);

// lambda(t | h_i) for t >= t_i; throws DomainError otherwise.
double intensity(std::span<const double> h_i, double t, double t_i,
                 const MtppParams& params);

ad::Tensor mark_logits(const ad::Tensor& h, const MtppParams& params);
std::vector<double> mark_distribution(std::span<const double> h_i,
                                      const MtppParams& params);

struct LikelihoodOptions {
  int k_int = 20;  // trapezoid points per interval (including endpoints)
};

// Sum over masked positions i of
//   log lambda(t_i | h_prev_i) - int_{prev_i}^{t_i} lambda + log m(c_i | h_prev_i)
// with signed integration limits when prev_i > t_i.
ad::Tensor conditional_loglik(const ad::Tensor& h_prev,
                              const ad::Tensor& prev_times,
                              const ad::Tensor& target_times,
                              std::span<const int> target_marks,
                              std::span<const std::uint8_t> mask,
                              const MtppParams& params,
                              const LikelihoodOptions& opts = {});

// Per-position probability m(c_i | h_prev_i) of the target marks, [n].
ad::Tensor target_mark_prob(const ad::Tensor& h_prev,
                            std::span<const int> target_marks,
                            const MtppParams& params);

ad::Tensor nll_clean(const EventTensors& ev, std::span<const int> marks,
                     const MtppParams& params, const LikelihoodOptions& opts = {});
ad::Tensor nll_clean(const Sequence& seq, const MtppParams& params,
                     const LikelihoodOptions& opts = {});

struct Prediction {
  double time = 0.0;
  int mark = 0;
  bool truncated = false;  // survival mass beyond the horizon > 0.01
};

struct PredictOptions {
  double horizon = 10.0;  // T_max, elapsed time covered by quadrature
  int k_pred = 200;
};

// Expected next arrival after t_i (density-weighted, with an exponential
// tail correction beyond the horizon) and the most probable mark.
Prediction predict_next(std::span<const double> h_i, double t_i,
                        const MtppParams& params, const PredictOptions& opts);

// T_max = 10 x mean inter-event time of ds.
PredictOptions default_predict_options(const Dataset& ds);

struct Metrics {
  double mae = 0.0;
  double mpa = 0.0;
};

// Running MAE/MPA over scored events of one sequence.
struct SequenceScore {
  double abs_err_sum = 0.0;
  std::size_t correct = 0;
  std::size_t count = 0;

  void add(double t_true, int c_true, double t_pred, int c_pred);
  Metrics metrics() const;
};

// Scores clean events 2..n of target, conditioning each on the history
// prefix of `history` (same length; position-aligned).
SequenceScore score_sequence(const Sequence& target, const Sequence& history,
                             const MtppParams& params,
                             const PredictOptions& opts);

// Mean over sequences of per-sequence MAE/MPA. histories may be empty (clean
// evaluation) or aligned one-to-one with ds.sequences.
Metrics metrics(const Dataset& ds, const MtppParams& params,
                const PredictOptions& opts,
                std::span<const Sequence> histories = {});

struct TrainConfig {
  AdamConfig adam;
  int epochs = 30;
  int batch_size = 16;
  std::uint64_t seed = 0;
  LikelihoodOptions lik;
};

struct TrainResult {
  MtppParams params;
  std::vector<double> train_loss;  // per epoch, mean nll per sequence
  std::vector<double> val_loss;    // per epoch; initial value first
};

double mean_nll(const Dataset& ds, const MtppParams& params,
                const LikelihoodOptions& opts = {});

// Gradient of the mean nll of the given sequences.
GradList nll_gradient(std::span<const Sequence> batch, const MtppParams& params,
                      const LikelihoodOptions& opts, double* loss_out);

// Minibatch Adam on mean nll_clean. Throws NumericError on divergence.
TrainResult train_mle(const Dataset& train, const Dataset& val,
                      MtppParams params, const TrainConfig& cfg);

void save_mtpp(const MtppParams& params, const std::filesystem::path& path);
MtppParams load_mtpp(const std::filesystem::path& path);

}  // namespace advtpp

#endif  // ADVTPP_MTPP_HPP_
