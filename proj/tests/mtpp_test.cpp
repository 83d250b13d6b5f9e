#include "advtpp/mtpp.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "advtpp/errors.hpp"
#include "test_util.hpp"

using namespace advtpp;
using namespace advtpp::test_util;

namespace {

const double kLog2 = std::log(2.0);

std::vector<double> row(const ad::Tensor& h, std::size_t i) {
  const std::size_t d = h.cols();
  return {h.values().begin() + static_cast<std::ptrdiff_t>(i * d),
          h.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * d)};
}

// Replaces the named tensor of params with x.
MtppParams with_param(MtppParams p, const std::string& name,
                      const ad::Tensor& x) {
  p.visit([&](const std::string& n, ad::Tensor& t) {
    if (n == name) t = x;
  });
  return p;
}

// Composite Simpson rule on [a, b] with m (even) panels.
template <class F>
double simpson(F f, double a, double b, int m) {
  const double h = (b - a) / m;
  double s = f(a) + f(b);
  for (int k = 1; k < m; ++k) s += (k % 2 ? 4.0 : 2.0) * f(a + k * h);
  return s * h / 3.0;
}

double softplus(double x) { return std::log1p(std::exp(x)); }

}  // namespace

TEST(Mtpp, ZeroParamsGiveLog2IntensityAndUniformMarks) {
  const MtppParams p = MtppParams::zeros(4, 6);
  const Sequence s = make_seq({0.5, 1.0, 2.5}, {0, 3, 1});
  const ad::Tensor h = encode(to_tensors(s, 4), p);
  for (double x : h.values()) EXPECT_EQ(x, 0.0);
  EXPECT_NEAR(intensity(row(h, 0), 3.0, 0.5, p), kLog2, 1e-15);
  for (double q : mark_distribution(row(h, 2), p)) EXPECT_NEAR(q, 0.25, 1e-15);
}

TEST(Mtpp, SingleEventNllMatchesClosedForm) {
  const MtppParams p = MtppParams::zeros(3, 4);
  for (double t1 : {0.1, 1.0, 7.5}) {
    const Sequence s = make_seq({t1}, {2});
    // -(log log2 - log2 t1 + log 1/3)
    const double expect = -(std::log(kLog2) - kLog2 * t1 - std::log(3.0));
    EXPECT_NEAR(nll_clean(s, p).item(), expect, 1e-12) << t1;
  }
}

TEST(Mtpp, CompensatorMatchesFineQuadrature) {
  MtppParams p = MtppParams::random(2, 4, 3);
  p.lambda_w = ad::Tensor::scalar(-0.8);
  p.lambda_b = ad::Tensor::scalar(0.4);
  const Sequence s = make_seq({0.3, 1.1, 2.0, 4.5}, {0, 1, 1, 0});
  const ad::Tensor h = encode(to_tensors(s, 2), p);
  const ad::Tensor hp = shift_history(h, p);
  // Independent evaluation of the log-likelihood with a fine Simpson rule.
  double ll = 0.0;
  double prev = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto hi = row(hp, i);
    auto lam = [&](double t) { return intensity(hi, t, prev, p); };
    ll += std::log(lam(s[i].t)) - simpson(lam, prev, s[i].t, 2000) +
          std::log(mark_distribution(hi, p)[static_cast<std::size_t>(s[i].c)]);
    prev = s[i].t;
  }
  LikelihoodOptions fine{400};
  EXPECT_NEAR(-nll_clean(s, p, fine).item(), ll, 1e-5);
  // The default grid is coarser but close.
  EXPECT_NEAR(-nll_clean(s, p).item(), ll, 5e-3);
}

TEST(Mtpp, DoublingQuadratureBarelyMovesNll) {
  const MtppParams p = MtppParams::random(3, 8, 11);
  std::mt19937_64 rng(5);
  for (int k = 0; k < 10; ++k) {
    const Sequence s = random_seq(rng, 12, 3);
    const double a = nll_clean(s, p, {20}).item();
    const double b = nll_clean(s, p, {40}).item();
    EXPECT_LT(std::fabs(a - b), 1e-3 * std::fabs(b));
  }
}

TEST(Mtpp, EncoderIsCausal) {
  const MtppParams p = MtppParams::random(3, 8, 1);
  const Sequence a = make_seq({0.5, 1.0, 2.0, 3.0, 4.0}, {0, 1, 2, 0, 1});
  const Sequence b = make_seq({0.5, 1.0, 2.0, 3.7, 9.0}, {0, 1, 2, 2, 0});
  const ad::Tensor ha = encode(to_tensors(a, 3), p);
  const ad::Tensor hb = encode(to_tensors(b, 3), p);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(row(ha, i), row(hb, i));
  EXPECT_NE(row(ha, 3), row(hb, 3));
}

TEST(Mtpp, PaddedTailDoesNotChangeRealRows) {
  const MtppParams p = MtppParams::random(3, 8, 2);
  std::mt19937_64 rng(9);
  std::vector<Sequence> seqs{random_seq(rng, 4, 3), random_seq(rng, 7, 3)};
  const PaddedBatch batch = pad_batch(seqs, 10, 3);
  for (std::size_t r = 0; r < seqs.size(); ++r) {
    const ad::Tensor plain = encode(to_tensors(seqs[r], 3), p);
    const EventTensors ev = to_tensors(batch, r);
    const ad::Tensor padded = encode(ev, p);
    for (std::size_t i = 0; i < seqs[r].size(); ++i) {
      const auto x = row(plain, i);
      const auto y = row(padded, i);
      for (std::size_t k = 0; k < x.size(); ++k) EXPECT_NEAR(x[k], y[k], 1e-12);
    }
    for (std::size_t i = seqs[r].size(); i < 10; ++i) {
      for (double v : row(padded, i)) EXPECT_EQ(v, 0.0);
    }
    EXPECT_NEAR(nll_clean(ev, batch.marks[r], p).item(),
                nll_clean(seqs[r], p).item(), 1e-10);
  }
}

TEST(Mtpp, IntensityIsPositiveAndRejectsPastQueries) {
  MtppParams p = MtppParams::random(2, 4, 4);
  p.lambda_w = ad::Tensor::scalar(-5.0);
  const std::vector<double> h{0.3, -0.2, 0.9, 0.1};
  for (double dt : {0.0, 1.0, 10.0, 100.0}) {
    EXPECT_GT(intensity(h, 1.0 + dt, 1.0, p), 0.0);
  }
  EXPECT_THROW(intensity(h, 0.5, 1.0, p), DomainError);
  // Monotone in elapsed time following the sign of the slope.
  EXPECT_GT(intensity(h, 2.0, 1.0, p), intensity(h, 3.0, 1.0, p));
}

TEST(Mtpp, MarkDistributionIsAProbabilityVector) {
  const MtppParams p = MtppParams::random(5, 8, 6);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 3.0);
  for (int k = 0; k < 20; ++k) {
    std::vector<double> h(8);
    for (double& x : h) x = n(rng);
    const auto q = mark_distribution(h, p);
    double s = 0.0;
    for (double x : q) {
      EXPECT_GE(x, 0.0);
      s += x;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Mtpp, NllGradientsMatchFiniteDifferences) {
  const MtppParams p = MtppParams::random(3, 4, 8);
  std::mt19937_64 rng(2);
  const Sequence s = random_seq(rng, 5, 3);
  p.visit([&](const std::string& name, const ad::Tensor& t) {
    auto f = [&](const ad::Tensor& x) {
      return nll_clean(s, with_param(p, name, x));
    };
    const auto r = ad::grad_check(f, t, 1e-5, 1e-4);
    EXPECT_TRUE(r.pass) << name << " rel " << r.max_rel_error << " at "
                        << r.worst_index;
  });
}

TEST(Mtpp, NllGradientInEventTimesAndMarksMatchesFiniteDifferences) {
  const MtppParams p = MtppParams::random(3, 4, 12);
  const Sequence s = make_seq({0.4, 1.3, 1.9, 3.2, 4.0}, {0, 2, 1, 1, 0});
  const EventTensors ev = to_tensors(s, 3);
  const auto marks = s.marks();
  auto by_time = [&](const ad::Tensor& t) {
    return nll_clean({t, ev.marks, ev.mask}, marks, p);
  };
  auto by_mark = [&](const ad::Tensor& c) {
    return nll_clean({ev.times, c, ev.mask}, marks, p);
  };
  const auto rt = ad::grad_check(by_time, ev.times, 1e-6, 1e-4);
  EXPECT_TRUE(rt.pass) << rt.max_rel_error;
  const auto rc = ad::grad_check(by_mark, ev.marks, 1e-6, 1e-4);
  EXPECT_TRUE(rc.pass) << rc.max_rel_error;
}

TEST(Mtpp, ConstantIntensityPredictsOneOverLambda) {
  for (double b : {-1.0, 0.0, 2.0}) {
    MtppParams p = MtppParams::zeros(3, 4);
    p.lambda_b = ad::Tensor::scalar(b);
    const double lam = softplus(b);
    const std::vector<double> h(4, 0.0);
    const Prediction pr = predict_next(h, 2.0, p, {10.0 / lam, 200});
    EXPECT_NEAR(pr.time - 2.0, 1.0 / lam, 1e-3);
    EXPECT_EQ(pr.mark, 0);
    EXPECT_FALSE(pr.truncated);
    // A short horizon is flagged but the tail term still keeps it exact.
    const Prediction short_h = predict_next(h, 2.0, p, {0.5 / lam, 200});
    EXPECT_TRUE(short_h.truncated);
    EXPECT_NEAR(short_h.time - 2.0, 1.0 / lam, 1e-3);
  }
}

TEST(Mtpp, PredictionMatchesDensityWeightedMean) {
  MtppParams p = MtppParams::random(2, 4, 5);
  p.lambda_w = ad::Tensor::scalar(0.7);
  const std::vector<double> h{0.2, -0.4, 0.1, 0.5};
  const double horizon = 30.0;
  // Oracle: int s lambda(s) exp(-Lambda(s)) ds with Lambda in closed form
  // through a fine Simpson cumulative integral.
  auto lam = [&](double s) { return intensity(h, 1.0 + s, 1.0, p); };
  auto density = [&](double s) {
    return s * lam(s) * std::exp(-simpson(lam, 0.0, s, 200));
  };
  const double expect = simpson(density, 0.0, horizon, 2000);
  const Prediction pr = predict_next(h, 1.0, p, {horizon, 2000});
  EXPECT_NEAR(pr.time - 1.0, expect, 1e-4);
  EXPECT_GT(pr.time, 1.0);
}

TEST(Mtpp, PredictionIsAfterLastEvent) {
  const MtppParams p = MtppParams::random(3, 8, 21);
  std::mt19937_64 rng(3);
  const Sequence s = random_seq(rng, 20, 3);
  const ad::Tensor h = encode(to_tensors(s, 3), p);
  for (std::size_t i = 0; i < s.size(); ++i) {
    EXPECT_GT(predict_next(row(h, i), s[i].t, p, {}).time, s[i].t);
  }
}

TEST(Metrics, SequenceScoreAveragesInjectedPredictions) {
  SequenceScore sc;
  sc.add(2.0, 1, 2.5, 1);
  sc.add(3.0, 0, 2.0, 2);
  sc.add(4.0, 2, 4.0, 2);
  const Metrics m = sc.metrics();
  EXPECT_NEAR(m.mae, 0.5, 1e-15);
  EXPECT_NEAR(m.mpa, 2.0 / 3.0, 1e-15);
  EXPECT_EQ(SequenceScore{}.metrics().mae, 0.0);
}

TEST(Metrics, MatchPerEventOracleAndStayInRange) {
  const MtppParams p = MtppParams::random(3, 8, 13);
  std::mt19937_64 rng(4);
  Dataset ds{"d", 3, {random_seq(rng, 6, 3), random_seq(rng, 9, 3)}, {}};
  const PredictOptions opts = default_predict_options(ds);
  double mae = 0.0;
  double mpa = 0.0;
  for (const Sequence& s : ds.sequences) {
    const ad::Tensor h = encode(to_tensors(s, 3), p);
    double e = 0.0;
    double c = 0.0;
    for (std::size_t i = 1; i < s.size(); ++i) {
      const Prediction pr = predict_next(row(h, i - 1), s[i - 1].t, p, opts);
      e += std::fabs(pr.time - s[i].t);
      c += pr.mark == s[i].c;
    }
    mae += e / static_cast<double>(s.size() - 1) / 2.0;
    mpa += c / static_cast<double>(s.size() - 1) / 2.0;
  }
  const Metrics m = metrics(ds, p, opts);
  EXPECT_NEAR(m.mae, mae, 1e-12);
  EXPECT_NEAR(m.mpa, mpa, 1e-12);
  EXPECT_GE(m.mae, 0.0);
  EXPECT_GE(m.mpa, 0.0);
  EXPECT_LE(m.mpa, 1.0);
}

TEST(Metrics, ConstantMarkGuessOnUniformMarksScoresOneInFive) {
  const MtppParams p = MtppParams::zeros(5, 4);
  std::mt19937_64 rng(17);
  Dataset ds{"u", 5, {}, {}};
  for (int k = 0; k < 100; ++k) ds.sequences.push_back(random_seq(rng, 60, 5));
  EXPECT_NEAR(metrics(ds, p, default_predict_options(ds)).mpa, 0.2, 0.03);
}

TEST(Metrics, HistoriesMustAlign) {
  const MtppParams p = MtppParams::zeros(2, 4);
  Dataset ds{"d", 2, {make_seq({1, 2}, {0, 1})}, {}};
  std::vector<Sequence> h{make_seq({1, 2, 3}, {0, 1, 0})};
  EXPECT_THROW(metrics(ds, p, {}, h), DataError);
}

TEST(TrainMle, RecoversPoissonRate) {
  HawkesParams hp{{2.0}, {{0.0}}, 1.0};
  const Dataset ds = simulate_dataset(hp, 60, 15.0, 64, 1);
  TrainConfig cfg;
  cfg.adam.lr = 0.05;
  cfg.epochs = 15;
  const TrainResult r =
      train_mle(ds, {}, MtppParams::random(1, 4, 1), cfg);
  const PredictOptions opts = default_predict_options(ds);
  double mean_rate = 0.0;
  double mean_gap = 0.0;
  std::size_t n = 0;
  for (std::size_t s = 0; s < 10; ++s) {
    const Sequence& seq = ds.sequences[s];
    const ad::Tensor h = encode(to_tensors(seq, 1), r.params);
    for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
      mean_rate += intensity(row(h, i), seq[i].t + 0.25, seq[i].t, r.params);
      mean_gap += predict_next(row(h, i), seq[i].t, r.params, opts).time - seq[i].t;
      ++n;
    }
  }
  mean_rate /= static_cast<double>(n);
  mean_gap /= static_cast<double>(n);
  EXPECT_NEAR(mean_rate, 2.0, 0.2);
  EXPECT_NEAR(mean_gap, 0.5, 0.05);
}

TEST(TrainMle, ValidationNllDropsOnHawkes) {
  // Each mark strongly excites the next one cyclically.
  HawkesParams hp{{0.2, 0.2, 0.2},
                  {{0.05, 0.8, 0.0}, {0.0, 0.05, 0.8}, {0.8, 0.0, 0.05}},
                  1.2};
  const Dataset ds = simulate_dataset(hp, 200, 100.0, 64, 7);
  const DatasetSplit sp = split_dataset(ds, 0.7, 0.1, 1);
  TrainConfig cfg;
  cfg.adam.lr = 0.01;
  cfg.epochs = 30;
  const TrainResult r = train_mle(sp.train, sp.val,
                                  MtppParams::random(3, 8, 3), cfg);
  ASSERT_EQ(r.val_loss.size(), 31u);
  EXPECT_LT(r.val_loss.back(), 0.8 * r.val_loss.front());
}

TEST(TrainMle, RejectsBadConfig) {
  Dataset empty{"e", 1, {}, {}};
  EXPECT_THROW(train_mle(empty, empty, MtppParams::zeros(1, 2), {}),
               ConfigError);
}

TEST(Checkpoint, RoundTripsAndRejectsShapeMismatch) {
  const MtppParams p = MtppParams::random(3, 6, 77);
  const auto path = temp_path("mtpp.json");
  save_mtpp(p, path);
  const MtppParams q = load_mtpp(path);
  EXPECT_EQ(q.num_marks, 3);
  EXPECT_EQ(q.dim, 6);
  p.visit([&](const std::string& name, const ad::Tensor& t) {
    q.visit([&](const std::string& n2, const ad::Tensor& u) {
      if (n2 != name) return;
      ASSERT_EQ(t.shape(), u.shape());
      for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(t[i], u[i]) << name;
    });
  });

  RawCheckpoint c = to_checkpoint(p, "mtpp", {{"num_marks", 3}, {"dim", 6}});
  c.tensors["mark_w"] = ad::Tensor::zeros({2, 6});
  save_checkpoint(c, path);
  try {
    load_mtpp(path);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("mark_w"), std::string::npos);
  }
  c = to_checkpoint(p, "attack", {});
  save_checkpoint(c, path);
  EXPECT_THROW(load_mtpp(path), DataError);
  std::filesystem::remove(path);
}
