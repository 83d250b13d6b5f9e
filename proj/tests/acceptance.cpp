// Acceptance suite: one PASS/FAIL line per criterion. Exits 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "advtpp/autodiff.hpp"
#include "advtpp/baselines.hpp"
#include "advtpp/ctes.hpp"
#include "advtpp/harness.hpp"
#include "advtpp/mtpp.hpp"
#include "advtpp/permattack.hpp"
#include "test_util.hpp"

using namespace advtpp;
using namespace advtpp::test_util;
using ad::Tensor;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Outcome {
  bool pass = true;
  std::string detail;
};

bool all_pass = true;

void report(int id, const Outcome& o, double secs, double limit) {
  const bool in_time = limit <= 0 || secs < limit;
  const bool pass = o.pass && in_time;
  all_pass = all_pass && pass;
  std::printf("criterion %d %s  %s; %.1f s", id, pass ? "PASS" : "FAIL",
              o.detail.c_str(), secs);
  if (limit > 0) std::printf(" (limit %.0f s)", limit);
  std::printf("\n");
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ------------------------------------------------------------ criterion 1

Outcome distance_oracles() {
  std::mt19937_64 rng(101);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 4 + static_cast<std::size_t>(u(rng) * 20);
    const Sequence s = random_seq(rng, n, 3);
    const DistanceParams p{0.25 + 2.0 * u(rng)};

    const std::vector<double> shift(n, 100.0 * u(rng));
    const Sequence shifted = apply_noise_and_sort(s, shift).sequence;
    worst = std::max(worst, std::fabs(distance_hard(s, shifted, p)));

    // Event i overtakes event i+1 (a different mark) but not event i+2. The
    // first event anchors the distance, so i >= 1.
    std::vector<Event> ev = s.events();
    const std::size_t i = 1 + static_cast<std::size_t>(u(rng) * (n - 3));
    ev[i + 1].c = (ev[i].c + 1) % 3;
    const Sequence clean(ev);
    const double lo = clean[i + 1].t - clean[i].t;
    const double hi = clean[i + 2].t - clean[i].t;
    const double eps = lo + (0.05 + 0.9 * u(rng)) * (hi - lo);
    std::vector<double> noise(n, 0.0);
    noise[i] = eps;
    const Sequence swapped = apply_noise_and_sort(clean, noise).sequence;
    worst = std::max(worst,
                     std::fabs(distance_hard(clean, swapped, p) - (eps + 2 * p.rho_c)));
  }
  return {worst <= 1e-12, fmt("50 instances, max deviation %.2e (tol 1e-12)", worst)};
}

// ------------------------------------------------------------ criterion 2

Tensor uniform_tensor(ad::Shape shape, std::mt19937_64& rng, double lo, double hi,
                      double min_abs = 0.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<double> v(n);
  for (double& x : v) {
    do {
      x = u(rng);
    } while (std::fabs(x) < min_abs);
  }
  return Tensor(std::move(shape), std::move(v));
}

Tensor weighted_sum(const Tensor& y) {
  std::vector<double> w(y.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.3 + 0.17 * static_cast<double>(i);
  return ad::sum(ad::mul(y, Tensor(y.shape(), w)));
}

AttackParams with_param(AttackParams p, const std::string& name, const Tensor& x) {
  p.visit([&](const std::string& n, Tensor& t) {
    if (n == name) t = x;
  });
  return p;
}

Outcome gradient_suite() {
  using Fn = std::function<Tensor(const Tensor&)>;
  double prim_worst = 0.0;
  double loss_worst = 0.0;
  double loss_abs = 0.0;
  int failures = 0;
  int checks = 0;
  double* abs_worst = nullptr;
  // Relative error is tracked over coordinates with |gradient| >= 1e-6.
  auto check = [&](const Fn& f, const Tensor& x, double tol, double atol,
                   double& worst) {
    const auto r = ad::grad_check(f, x, 1e-5, tol, atol);
    for (std::size_t k = 0; k < r.analytic.size(); ++k) {
      const double scale = std::max(std::fabs(r.analytic[k]), std::fabs(r.numeric[k]));
      const double d = std::fabs(r.analytic[k] - r.numeric[k]);
      if (abs_worst) *abs_worst = std::max(*abs_worst, d);
      if (scale >= 1e-6) worst = std::max(worst, d / scale);
    }
    failures += r.pass ? 0 : 1;
    ++checks;
  };
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    const Tensor a = uniform_tensor({2, 3}, rng, 0.5, 2.0);
    const Tensor b = uniform_tensor({2, 3}, rng, 0.5, 2.0);
    const Tensor m = uniform_tensor({3, 4}, rng, -1.5, 1.5);
    const Tensor v = uniform_tensor({3}, rng, -1.5, 1.5, 1e-3);
    const Tensor pos = uniform_tensor({3}, rng, 0.2, 3.0);
    const std::vector<std::pair<Fn, Tensor>> prims = {
        {[&](const Tensor& x) { return weighted_sum(x + b); }, a},
        {[&](const Tensor& x) { return weighted_sum(b - x); }, a},
        {[&](const Tensor& x) { return weighted_sum(x * b); }, a},
        {[&](const Tensor& x) { return weighted_sum(b / x); }, a},
        {[&](const Tensor& x) { return weighted_sum(ad::power(x, 2.5)); }, a},
        {[&](const Tensor& x) { return weighted_sum(ad::matmul(x, m)); }, a},
        {[&](const Tensor& x) { return weighted_sum(ad::matmul(a, x)); }, m},
        {[&](const Tensor& x) { return weighted_sum(ad::transpose(x)); }, a},
        {[&](const Tensor& x) { return weighted_sum(ad::exp(x)); }, v},
        {[&](const Tensor& x) { return weighted_sum(ad::log(x)); }, pos},
        {[&](const Tensor& x) { return weighted_sum(ad::softplus(x)); }, v},
        {[&](const Tensor& x) { return weighted_sum(ad::sigmoid(x)); }, v},
        {[&](const Tensor& x) { return weighted_sum(ad::tanh(x)); }, v},
        {[&](const Tensor& x) { return weighted_sum(ad::relu(x)); }, v},
        {[&](const Tensor& x) { return weighted_sum(ad::abs(x)); }, v},
        {[&](const Tensor& x) { return weighted_sum(ad::sin(x)); }, v},
        {[&](const Tensor& x) { return weighted_sum(ad::cos(x)); }, v},
        {[&](const Tensor& x) { return weighted_sum(ad::sum(x, 1)); }, a},
        {[&](const Tensor& x) { return weighted_sum(ad::mean(x, 0)); }, a},
        {[&](const Tensor& x) { return weighted_sum(ad::softmax(x, 1)); }, a},
        {[&](const Tensor& x) { return weighted_sum(ad::log_softmax(x, 0)); }, a},
        {[&](const Tensor& x) { return weighted_sum(ad::concat({x, b}, 1)); }, a},
        {[&](const Tensor& x) { return weighted_sum(ad::slice(x, 1, 1, 3)); }, a},
        {[&](const Tensor& x) { return weighted_sum(ad::gather_rows(x, {1, 0, 1})); },
         a},
        {[&](const Tensor& x) { return ad::dot(x, v); }, pos},
    };
    abs_worst = nullptr;
    for (const auto& [f, x] : prims) check(f, x, 1e-4, 0.0, prim_worst);
    abs_worst = &loss_abs;

    // End to end: every attack parameter, sequence length 2..6.
    const std::size_t n = 2 + seed % 5;
    const Sequence s = random_seq(rng, n, 3);
    const MtppParams model = MtppParams::random(3, 6, 1000 + seed);
    const AttackParams attack = AttackParams::random(3, 6, 4, 6, 4, 2000 + seed);
    AttackConfig cfg;
    cfg.tau = 0.7;
    attack.visit([&](const std::string& name, const Tensor& t) {
      auto fn = [&](const Tensor& x) {
        return attack_loss(s, with_param(attack, name, x), model, cfg);
      };
      // Sinkhorn ignores a constant shift of the scores, so some scorer
      // gradients are exactly zero; below 1e-9 the central difference is
      // roundoff.
      check(fn, t, 1e-3, 1e-9, loss_worst);
    });
  }
  return {failures == 0,
          fmt("%d checks over 20 seeds, %d failed; worst rel err primitives %.1e "
              "(tol 1e-4), attack_loss %.1e (tol 1e-3, max abs diff %.1e, floor 1e-9)",
              checks, failures, prim_worst, loss_worst, loss_abs)};
}

// ------------------------------------------------------------ criterion 3

Outcome sinkhorn_invariants() {
  std::mt19937_64 rng(303);
  std::normal_distribution<double> g(0.0, 1.0);
  auto random_scores = [&](std::size_t n) {
    std::vector<double> v(n * n);
    for (double& x : v) x = g(rng);
    return Tensor({n, n}, std::move(v));
  };
  const std::size_t n = 5;
  const std::vector<std::uint8_t> mask(n, 1);
  std::string detail = "max |row or col sum - 1| at L=20:";
  bool pass = true;
  for (double tau : {0.1, 1.0, 5.0}) {
    double worst = 0.0;
    for (int k = 0; k < 10; ++k) {
      const Tensor p = sinkhorn(random_scores(n), tau, 20, mask);
      for (std::size_t i = 0; i < n; ++i) {
        double r = 0.0;
        double c = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          r += p.at(i, j);
          c += p.at(j, i);
        }
        worst = std::max({worst, std::fabs(r - 1.0), std::fabs(c - 1.0)});
      }
    }
    pass = pass && worst <= 1e-6;
    detail += fmt(" tau %g %.1e", tau, worst);
  }
  int matched = 0;
  for (int k = 0; k < 10; ++k) {
    const Tensor s = random_scores(n);
    const Tensor p = sinkhorn(s, 0.01, 1000, mask);
    const std::vector<double> w(s.values().begin(), s.values().end());
    matched += harden(p) == best_assignment(w, n) ? 1 : 0;
  }
  pass = pass && matched == 10;
  detail += fmt(" (tol 1e-6); tau 0.01 L=1000 matches optimal assignment %d/10", matched);
  return {pass, detail};
}

// ------------------------------------------------------------ criterion 4

Outcome mle_sanity() {
  HawkesParams poisson{{2.0}, {{0.0}}, 1.0};
  const Dataset pd = simulate_dataset(poisson, 60, 15.0, 64, 1);
  TrainConfig pc;
  pc.adam.lr = 0.05;
  pc.epochs = 15;
  const MtppParams pm = train_mle(pd, {}, MtppParams::random(1, 4, 1), pc).params;
  const PredictOptions opts = default_predict_options(pd);
  double gap = 0.0;
  std::size_t count = 0;
  for (const Sequence& seq : pd.sequences) {
    const Tensor h = encode(to_tensors(seq, 1), pm);
    for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
      const std::span<const double> row(h.values().data() + i * h.cols(), h.cols());
      gap += predict_next(row, seq[i].t, pm, opts).time - seq[i].t;
      ++count;
    }
  }
  gap /= static_cast<double>(count);
  const bool gap_ok = std::fabs(gap - 0.5) <= 0.05;

  const DataConfig dc;
  const DatasetSplit sp = split(load_or_simulate(dc), dc);
  TrainConfig hc;
  hc.adam.lr = 0.01;
  hc.epochs = 30;
  const TrainResult r = train_mle(sp.train, sp.val, MtppParams::random(3, 8, 3), hc);
  const double drop = 1.0 - r.val_loss.back() / r.val_loss.front();
  return {gap_ok && drop >= 0.2,
          fmt("Poisson mu=2 mean predicted gap %.4f (target 0.5 +- 10%%); Hawkes val "
              "nll %.2f -> %.2f, drop %.1f%% (need >= 20%%)",
              gap, r.val_loss.front(), r.val_loss.back(), 100 * drop)};
}

// ------------------------------------------------------- criteria 5 to 8

struct SeedRun {
  MetricsRow clean, wb, bb, control, pgd, mifgsm, defended_clean, defended_wb;
  double seconds_attack = 0.0;   // learner + WB attack + control
  double seconds_defense = 0.0;  // defense + attack against the defended model
  int invalid = 0;
  int emitted = 0;
  double max_hinge = 0.0;
  int hinge_over = 0;
  int hinge_count = 0;
};

void check_outputs(SeedRun& run, const AttackOutput& out) {
  for (const Sequence& s : out.histories) {
    ++run.emitted;
    bool ok = true;
    for (std::size_t i = 0; i < s.size(); ++i) {
      ok = ok && std::isfinite(s[i].t) && s[i].t >= 0.0 && (i == 0 || s[i].t > s[i - 1].t);
    }
    run.invalid += ok ? 0 : 1;
  }
  for (double h : out.hinges) {
    ++run.hinge_count;
    run.max_hinge = std::max(run.max_hinge, h);
    run.hinge_over += h < 1e-3 ? 0 : 1;
  }
}

ExperimentConfig acceptance_config() {
  ExperimentConfig cfg;
  cfg.attack.attack.rho_d = 1.0;
  cfg.attack.attack.rho_ab = 100.0;
  return cfg;
}

SeedRun run_seed(const DatasetSplit& data, const ExperimentConfig& cfg,
                 std::uint64_t seed) {
  SeedRun run;
  const Dataset& test = data.test;
  const PredictOptions po = default_predict_options(data.train);
  AttackConfig final_cfg = cfg.attack.attack;
  final_cfg.tau = cfg.attack.tau_end;

  auto start = Clock::now();
  const MtppParams learner = train_learner(data, cfg.model, seed).params;
  const AttackParams wb =
      train_attack(data.train, data.val, learner, cfg.attack, seed).params;
  const AttackOutput clean_out = no_attack(test);
  const AttackOutput wb_out = run_permtpp(test, wb, learner, final_cfg);
  const AttackOutput ctrl_out =
      run_random_control(test, wb_out.distances, seed, final_cfg.rho_c);
  run.clean = evaluate(test, clean_out, learner, po, "none", "none", seed);
  run.wb = evaluate(test, wb_out, learner, po, "permtpp", "whitebox", seed);
  run.control = evaluate(test, ctrl_out, learner, po, "random", "none", seed);
  run.seconds_attack = seconds_since(start);

  const MtppParams surrogate = train_learner(data, cfg.model, seed + 1000).params;
  const AttackParams bb =
      train_attack(data.train, data.val, surrogate, cfg.attack, seed).params;
  const AttackOutput bb_out = run_permtpp(test, bb, surrogate, final_cfg);
  run.bb = evaluate(test, bb_out, learner, po, "permtpp", "blackbox", seed);

  BaselineConfig base;
  base.steps = cfg.attack.baseline_steps;
  base.momentum = cfg.attack.baseline_momentum;
  const double target = wb_out.mean_distance();
  const AttackOutput pgd_out =
      run_baseline(test, learner, match_budget(test, learner, base, false, target), false);
  const AttackOutput mi_out =
      run_baseline(test, learner, match_budget(test, learner, base, true, target), true);
  run.pgd = evaluate(test, pgd_out, learner, po, "pgd", "whitebox", seed);
  run.mifgsm = evaluate(test, mi_out, learner, po, "mifgsm", "whitebox", seed);

  start = Clock::now();
  const MtppParams defended = train_defense(data, learner, cfg, seed).model;
  const AttackParams def_attack =
      train_attack(data.train, data.val, defended, cfg.attack, seed).params;
  const AttackOutput def_out = run_permtpp(test, def_attack, defended, final_cfg);
  run.defended_clean = evaluate(test, clean_out, defended, po, "none", "none", seed);
  run.defended_wb = evaluate(test, def_out, defended, po, "permtpp", "whitebox", seed);
  run.seconds_defense = seconds_since(start);

  for (const AttackOutput* out :
       {&clean_out, &wb_out, &ctrl_out, &bb_out, &pgd_out, &mi_out, &def_out}) {
    check_outputs(run, *out);
  }
  return run;
}

void print_row(const char* label, const std::vector<SeedRun>& runs,
               MetricsRow SeedRun::*field) {
  std::printf("  %-16s", label);
  double mae = 0.0, mpa = 0.0, dist = 0.0;
  for (const SeedRun& r : runs) {
    const MetricsRow& m = r.*field;
    std::printf(" | mae %.4f mpa %.4f d %7.2f", m.mae, m.mpa, m.mean_distance);
    mae += m.mae;
    mpa += m.mpa;
    dist += m.mean_distance;
  }
  const double k = static_cast<double>(runs.size());
  std::printf(" | mean mae %.4f mpa %.4f d %.2f\n", mae / k, mpa / k, dist / k);
}

double mean_of(const std::vector<SeedRun>& runs, MetricsRow SeedRun::*field,
               double MetricsRow::*metric) {
  double s = 0.0;
  for (const SeedRun& r : runs) s += r.*field.*metric;
  return s / static_cast<double>(runs.size());
}

}  // namespace

int main() {
  const auto timed = [](int id, Outcome (*fn)(), double limit) {
    const auto start = Clock::now();
    const Outcome o = fn();
    report(id, o, seconds_since(start), limit);
  };
  timed(1, distance_oracles, 1.0);
  timed(2, gradient_suite, 60.0);
  timed(3, sinkhorn_invariants, 10.0);
  timed(4, mle_sanity, 300.0);

  const ExperimentConfig cfg = acceptance_config();
  const DatasetSplit data = split(load_or_simulate(cfg.data), cfg.data);
  std::vector<SeedRun> runs;
  for (std::uint64_t seed : {0, 1, 2}) {
    runs.push_back(run_seed(data, cfg, seed));
    std::printf("  seed %llu done (attack %.0f s, defense %.0f s)\n",
                static_cast<unsigned long long>(seed), runs.back().seconds_attack,
                runs.back().seconds_defense);
    std::fflush(stdout);
  }
  std::printf("  test set: %zu sequences; per seed 0 | 1 | 2 then mean\n",
              data.test.sequences.size());
  print_row("no attack", runs, &SeedRun::clean);
  print_row("permtpp wb", runs, &SeedRun::wb);
  print_row("random control", runs, &SeedRun::control);
  print_row("permtpp bb", runs, &SeedRun::bb);
  print_row("pgd wb", runs, &SeedRun::pgd);
  print_row("mifgsm wb", runs, &SeedRun::mifgsm);
  print_row("defended clean", runs, &SeedRun::defended_clean);
  print_row("defended wb", runs, &SeedRun::defended_wb);

  using M = MetricsRow;
  const double mpa_clean = mean_of(runs, &SeedRun::clean, &M::mpa);
  const double mae_clean = mean_of(runs, &SeedRun::clean, &M::mae);
  const double mpa_wb = mean_of(runs, &SeedRun::wb, &M::mpa);
  const double mae_wb = mean_of(runs, &SeedRun::wb, &M::mae);
  const double mpa_ctrl = mean_of(runs, &SeedRun::control, &M::mpa);
  const double mae_ctrl = mean_of(runs, &SeedRun::control, &M::mae);
  const double mpa_bb = mean_of(runs, &SeedRun::bb, &M::mpa);
  const double mpa_def = mean_of(runs, &SeedRun::defended_wb, &M::mpa);

  double attack_secs = 0.0, defense_secs = 0.0;
  int invalid = 0, emitted = 0, hinge_over = 0, hinge_count = 0;
  double max_hinge = 0.0;
  for (const SeedRun& r : runs) {
    attack_secs += r.seconds_attack;
    defense_secs += r.seconds_defense;
    invalid += r.invalid;
    emitted += r.emitted;
    hinge_over += r.hinge_over;
    hinge_count += r.hinge_count;
    max_hinge = std::max(max_hinge, r.max_hinge);
  }

  const bool vs_clean = mpa_wb < mpa_clean && mae_wb > mae_clean;
  const bool vs_ctrl = mpa_wb < mpa_ctrl && mae_wb > mae_ctrl;
  report(5,
         {vs_clean && vs_ctrl,
          fmt("mean over 3 seeds: WB mpa %.4f mae %.4f; no attack mpa %.4f mae %.4f "
              "(%s); matched control mpa %.4f mae %.4f (%s)",
              mpa_wb, mae_wb, mpa_clean, mae_clean, vs_clean ? "beats" : "does not beat",
              mpa_ctrl, mae_ctrl, vs_ctrl ? "beats" : "does not beat")},
         attack_secs, 900.0);
  report(6,
         {mpa_clean - mpa_wb >= mpa_clean - mpa_bb,
          fmt("MPA degradation WB %.4f vs BB %.4f (surrogate seeds +1000)",
              mpa_clean - mpa_wb, mpa_clean - mpa_bb)},
         0.0, 0.0);
  const double mpa_def_clean = mean_of(runs, &SeedRun::defended_clean, &M::mpa);
  report(7,
         {mpa_def > mpa_wb,
          fmt("MPA under the same attack recipe trained against each model: defended "
              "%.4f vs clean-trained %.4f; realized distance %.2f vs %.2f; MPA drop "
              "from unattacked %.4f vs %.4f",
              mpa_def, mpa_wb, mean_of(runs, &SeedRun::defended_wb, &M::mean_distance),
              mean_of(runs, &SeedRun::wb, &M::mean_distance), mpa_def_clean - mpa_def,
              mpa_clean - mpa_wb)},
         defense_secs, 1800.0);
  report(8,
         {invalid == 0 && hinge_over == 0,
          fmt("%d/%d emitted sequences valid over 7 methods; PermTPP hinge < 1e-3 in "
              "%d/%d sequences, max %.3e",
              emitted - invalid, emitted, hinge_count - hinge_over, hinge_count,
              max_hinge)},
         0.0, 0.0);
  return all_pass ? 0 : 1;
}
