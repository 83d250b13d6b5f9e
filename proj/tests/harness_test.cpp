#include "advtpp/harness.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "advtpp/errors.hpp"
#include "advtpp/io.hpp"
#include "test_util.hpp"

using namespace advtpp;
using namespace advtpp::test_util;

namespace {

// A small simulated setup shared by the training tests.
ExperimentConfig small_config() {
  ExperimentConfig cfg;
  cfg.data.sequences = 60;
  cfg.data.horizon = 40.0;
  cfg.data.max_length = 24;
  cfg.model.epochs = 10;
  cfg.attack.epochs = 6;
  cfg.attack.dim = 4;
  cfg.attack.hidden = 8;
  cfg.attack.time_dim = 4;
  return cfg;
}

class HarnessTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    cfg_ = new ExperimentConfig(small_config());
    data_ = new DatasetSplit(split(load_or_simulate(cfg_->data), cfg_->data));
    model_ = new MtppParams(train_learner(*data_, cfg_->model, 3).params);
  }
  static void TearDownTestSuite() {
    delete cfg_;
    delete data_;
    delete model_;
  }

  static ExperimentConfig* cfg_;
  static DatasetSplit* data_;
  static MtppParams* model_;
};

ExperimentConfig* HarnessTest::cfg_ = nullptr;
DatasetSplit* HarnessTest::data_ = nullptr;
MtppParams* HarnessTest::model_ = nullptr;

TEST(ConfigTest, ParsesSectionsCommentsAndGlobals) {
  const ExperimentConfig cfg = parse_config(R"(
# experiment
seeds = 1, 2,3
mode = blackbox
[data]
sequences = 50   # fewer
mu = 0.4
[model]
dim = 16
[attack]
rho_ab = 100
tau_end = 0.05
[defense]
rounds = 4
)");
  EXPECT_EQ(cfg.seeds, (std::vector<std::uint64_t>{1, 2, 3}));
  EXPECT_EQ(cfg.mode, Mode::kBlackBox);
  EXPECT_EQ(cfg.data.sequences, 50);
  EXPECT_DOUBLE_EQ(cfg.data.mu, 0.4);
  EXPECT_EQ(cfg.model.dim, 16);
  EXPECT_DOUBLE_EQ(cfg.attack.attack.rho_ab, 100.0);
  EXPECT_DOUBLE_EQ(cfg.attack.tau_end, 0.05);
  EXPECT_EQ(cfg.defense.rounds, 4);
  EXPECT_EQ(cfg.defense.k_adv, 2);
  EXPECT_NO_THROW(cfg.validate());
}

TEST(ConfigTest, RejectsUnknownKeysSectionsAndValues) {
  EXPECT_THROW(parse_config("[model]\nwidth = 3\n"), ConfigError);
  EXPECT_THROW(parse_config("[optimizer]\nlr = 3\n"), ConfigError);
  EXPECT_THROW(parse_config("[model]\ndim = eight\n"), ConfigError);
  EXPECT_THROW(parse_config("[model]\ndim = 8.5\n"), ConfigError);
  EXPECT_THROW(parse_config("[model\n"), ConfigError);
  EXPECT_THROW(parse_config("dim 8\n"), ConfigError);
  EXPECT_THROW(parse_config("mode = greybox\n"), ConfigError);
}

TEST(ConfigTest, OverridesUseSectionDotKey) {
  ExperimentConfig cfg;
  apply_override(cfg, "attack.rho_d", "2.5");
  apply_override(cfg, "seeds", "4");
  EXPECT_DOUBLE_EQ(cfg.attack.attack.rho_d, 2.5);
  EXPECT_EQ(cfg.seeds, std::vector<std::uint64_t>{4});
  EXPECT_THROW(apply_override(cfg, "rho_d", "1"), ConfigError);
  const auto keys = config_keys();
  EXPECT_NE(std::find(keys.begin(), keys.end(), "defense.k_def"), keys.end());
}

TEST(ConfigTest, ValidatesSplitAndPaths) {
  ExperimentConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.data.test_frac = 0.3;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.data.path = "/nonexistent/data.jsonl";
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.data.alpha_next = 5.0;  // supercritical
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(ConfigTest, LoadsFromFile) {
  const auto path = temp_path("cfg.ini");
  write_atomic(path, "[model]\nepochs = 3\n");
  EXPECT_EQ(load_config(path).model.epochs, 3);
  std::filesystem::remove(path);
  EXPECT_THROW(load_config(path), ConfigError);
}

TEST(ScheduleTest, FlatThenGeometricToEnd) {
  const int epochs = 10;
  for (int e = 0; e < 5; ++e) EXPECT_DOUBLE_EQ(tau_at(e, epochs, 1.0, 0.1), 1.0);
  EXPECT_NEAR(tau_at(9, epochs, 1.0, 0.1), 0.1, 1e-12);
  for (int e = 5; e < 9; ++e) {
    const double r = tau_at(e + 1, epochs, 1.0, 0.1) / tau_at(e, epochs, 1.0, 0.1);
    EXPECT_NEAR(r, std::pow(0.1, 1.0 / 5.0), 1e-12);
  }
}

TEST(DataTest, SimulatorParamsAndSplitSizes) {
  const DataConfig d;
  const HawkesParams hp = hawkes_params(d);
  ASSERT_EQ(hp.num_marks(), 3);
  EXPECT_DOUBLE_EQ(hp.alpha[0][1], 0.8);
  EXPECT_DOUBLE_EQ(hp.alpha[2][0], 0.8);
  EXPECT_DOUBLE_EQ(hp.alpha[1][1], 0.05);
  EXPECT_DOUBLE_EQ(hp.alpha[1][0], 0.0);
  ExperimentConfig cfg = small_config();
  const DatasetSplit s = split(load_or_simulate(cfg.data), cfg.data);
  EXPECT_EQ(s.train.sequences.size(), 42u);
  EXPECT_EQ(s.val.sequences.size(), 6u);
  EXPECT_EQ(s.test.sequences.size(), 12u);
}

TEST(MetricsCsvTest, RoundTripsAndChecksHeader) {
  const std::vector<MetricsRow> rows = {
      {"permtpp", "whitebox", 0.5, 0.25, 3.125, 101.5, 7},
      {"none", "none", 0.125, 0.5, 0.0, 90.0, 7}};
  const std::string text = metrics_csv(rows);
  EXPECT_EQ(text.substr(0, text.find('\n')), kMetricsHeader);
  const auto back = parse_metrics_csv(text);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].method, "permtpp");
  EXPECT_EQ(back[0].mode, "whitebox");
  EXPECT_DOUBLE_EQ(back[0].mean_distance, 3.125);
  EXPECT_EQ(back[1].seed, 7u);
  EXPECT_THROW(parse_metrics_csv("a,b\n"), DataError);
  EXPECT_THROW(parse_metrics_csv(std::string(kMetricsHeader) + "\nx,y,1\n"), DataError);
  const auto path = temp_path("rows.csv");
  write_metrics_csv(rows, path);
  EXPECT_EQ(read_metrics_csv(path).size(), 2u);
  std::filesystem::remove(path);
}

TEST_F(HarnessTest, NoAttackRowEqualsCleanMetrics) {
  const PredictOptions po = default_predict_options(data_->train);
  const MetricsRow row = evaluate(data_->test, no_attack(data_->test), *model_, po,
                                  "none", "none", 0);
  const Metrics clean = metrics(data_->test, *model_, po);
  EXPECT_DOUBLE_EQ(row.mae, clean.mae);
  EXPECT_DOUBLE_EQ(row.mpa, clean.mpa);
  EXPECT_EQ(row.mean_distance, 0.0);
  EXPECT_NEAR(row.objective, mean_nll(data_->test, *model_), 1e-9);
}

TEST_F(HarnessTest, RowsAreDeterministic) {
  const PredictOptions po = default_predict_options(data_->train);
  const AttackParams atk = AttackParams::random(3, model_->dim, 4, 8, 4, 5);
  const AttackConfig ac;
  const auto a = evaluate(data_->test, run_permtpp(data_->test, atk, *model_, ac),
                          *model_, po, "permtpp", "whitebox", 1);
  const auto b = evaluate(data_->test, run_permtpp(data_->test, atk, *model_, ac),
                          *model_, po, "permtpp", "whitebox", 1);
  EXPECT_EQ(a.mae, b.mae);
  EXPECT_EQ(a.mpa, b.mpa);
  EXPECT_EQ(a.objective, b.objective);
}

TEST_F(HarnessTest, RandomControlMatchesPerSequenceTargets) {
  std::vector<double> targets;
  for (std::size_t i = 0; i < data_->test.sequences.size(); ++i) {
    targets.push_back(i % 3 == 0 ? 0.0 : 0.5 * static_cast<double>(i));
  }
  const AttackOutput out = run_random_control(data_->test, targets, 4);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] == 0.0) {
      EXPECT_EQ(out.histories[i], data_->test.sequences[i]);
    } else {
      EXPECT_GE(out.distances[i], 0.9 * targets[i]);
      EXPECT_LE(out.distances[i], 1.1 * targets[i]);
    }
  }
  const Dataset ds = to_dataset(out, data_->test);
  EXPECT_EQ(ds.perms.size(), ds.sequences.size());
}

TEST_F(HarnessTest, MatchBudgetHitsTargetDistance) {
  const double target = 4.0;
  BaselineConfig base;
  base.steps = 5;
  for (bool momentum : {false, true}) {
    const BaselineConfig c = match_budget(data_->test, *model_, base, momentum, target);
    const double d = run_baseline(data_->test, *model_, c, momentum).mean_distance();
    EXPECT_NEAR(d, target, 0.1 * target) << "momentum " << momentum;
    EXPECT_DOUBLE_EQ(c.step_size, 2.5 * c.eps_budget / c.steps);
  }
}

TEST_F(HarnessTest, DefenseGradientMatchesFiniteDifferences) {
  const std::vector<Sequence> clean(data_->test.sequences.begin(),
                                    data_->test.sequences.begin() + 2);
  std::vector<Sequence> pert;
  std::mt19937_64 rng(3);
  for (const Sequence& s : clean) {
    std::vector<double> noise(s.size());
    std::uniform_real_distribution<double> u(-0.3, 0.3);
    for (double& x : noise) x = u(rng);
    pert.push_back(apply_noise_and_sort(s, noise).sequence);
  }
  const LikelihoodOptions lik;
  const GradList g = defense_gradient(clean, pert, *model_, lik, nullptr);
  auto loss = [&](const MtppParams& m) {
    double v = 0.0;
    defense_gradient(clean, pert, m, lik, &v);
    return v;
  };
  // Spot-check the first entries of every parameter tensor.
  std::size_t k = 0;
  model_->visit([&](const std::string& name, const ad::Tensor& t) {
    for (std::size_t i = 0; i < std::min<std::size_t>(t.size(), 3); ++i) {
      const double h = 1e-5;
      auto shifted = [&](double d) {
        MtppParams m = *model_;
        std::size_t kk = 0;
        m.visit([&](const std::string&, ad::Tensor& x) {
          if (kk++ != k) return;
          std::vector<double> v(x.values().begin(), x.values().end());
          v[i] += d;
          x = ad::Tensor(x.shape(), std::move(v));
        });
        return loss(m);
      };
      const double fd = (shifted(h) - shifted(-h)) / (2 * h);
      EXPECT_NEAR(g[k][i], fd, 1e-4 * std::max(1.0, std::fabs(fd))) << name << "[" << i << "]";
    }
    ++k;
  });
}

TEST_F(HarnessTest, AttackTrainingLowersObjective) {
  AttackTrainConfig ac = cfg_->attack;
  ac.epochs = 12;
  const auto res = train_attack(data_->train, data_->val, *model_, ac, 2);
  ASSERT_EQ(res.train_loss.size(), 12u);
  ASSERT_EQ(res.val_loss.size(), 12u);
  const double first = res.train_loss.front();
  const double last = res.train_loss.back();
  EXPECT_LE(last, first - 0.1 * std::fabs(first));
}

TEST_F(HarnessTest, LargeDistanceWeightShrinksEmittedDistance) {
  AttackTrainConfig ac = cfg_->attack;
  ac.attack.rho_d = 0.1;
  const auto loose = train_attack(data_->train, {}, *model_, ac, 4).params;
  ac.attack.rho_d = 1e4;
  const auto tight = train_attack(data_->train, {}, *model_, ac, 4).params;
  AttackConfig eval = ac.attack;
  eval.tau = ac.tau_end;
  const double d_loose = run_permtpp(data_->test, loose, *model_, eval).mean_distance();
  const double d_tight = run_permtpp(data_->test, tight, *model_, eval).mean_distance();
  EXPECT_LT(d_tight, d_loose);
}

TEST_F(HarnessTest, NonFiniteAdversaryAbortsWithLastGoodCheckpoint) {
  MtppParams bad = *model_;
  std::vector<double> v(bad.lambda_b.values().begin(), bad.lambda_b.values().end());
  v[0] = std::nan("");
  bad.lambda_b = ad::Tensor(bad.lambda_b.shape(), v);
  const auto path = temp_path("last_good.json");
  EXPECT_THROW(train_attack(data_->train, {}, bad, cfg_->attack, 1, path), NumericError);
  ASSERT_TRUE(std::filesystem::exists(path));
  const AttackParams saved = load_attack(path);
  const AttackParams init = AttackParams::random(3, bad.dim, cfg_->attack.dim,
                                                 cfg_->attack.hidden,
                                                 cfg_->attack.time_dim, 1);
  EXPECT_EQ(saved.gs_w1.values()[0], init.gs_w1.values()[0]);
  std::filesystem::remove(path);
}

TEST_F(HarnessTest, DefenseWithInertAttackReducesToMle) {
  // Flat scores harden to the identity and a zero head adds no noise, so the
  // defense objective is the clean nll.
  AttackParams inert = AttackParams::zeros(3, model_->dim, 4, 8, 4);
  ExperimentConfig cfg = *cfg_;
  cfg.defense.rounds = 4;
  cfg.defense.k_adv = 0;
  cfg.defense.k_def = 1;
  const MtppParams start = MtppParams::random(3, model_->dim, 9);
  const DefenseResult def = train_defense(*data_, start, cfg, 9, &inert);

  TrainConfig tc;
  tc.adam.lr = cfg.defense.lr;
  tc.epochs = 4;
  const MtppParams mle = train_mle(data_->train, data_->val, start, tc).params;
  const double a = mean_nll(data_->val, def.model);
  const double b = mean_nll(data_->val, mle);
  EXPECT_NEAR(a, b, 0.05 * std::fabs(b));
  EXPECT_LT(a, mean_nll(data_->val, start));
  // Attack phase leaves the clean objective alone; defense phases lower it.
  for (std::size_t r = 0; r + 1 < def.trace.size(); r += 2) {
    EXPECT_LT(def.trace[r + 1], def.trace[r]);
  }
}

TEST_F(HarnessTest, DefenseTraceAlternates) {
  ExperimentConfig cfg = *cfg_;
  cfg.defense.rounds = 3;
  cfg.defense.k_adv = 1;
  cfg.defense.k_def = 1;
  const DefenseResult def = train_defense(*data_, *model_, cfg, 5);
  ASSERT_EQ(def.trace.size(), 6u);
  int lowered = 0;
  for (std::size_t r = 0; r + 1 < def.trace.size(); r += 2) {
    lowered += def.trace[r + 1] < def.trace[r];
  }
  EXPECT_EQ(lowered, 3);
}

}  // namespace
