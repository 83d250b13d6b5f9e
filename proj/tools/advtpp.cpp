// Command-line front end: simulate, train, attack-train, attack-emit, defend,
// evaluate, report.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "advtpp/errors.hpp"
#include "advtpp/harness.hpp"

namespace {

using namespace advtpp;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitNumeric = 2;

// Options shared by every subcommand that reads the experiment config.
struct Common {
  std::string config;
  std::string data;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

void add_common(CLI::App* sub, Common& c, bool with_data = true) {
  sub->add_option("--config", c.config, "experiment config file");
  if (with_data) sub->add_option("--data", c.data, "dataset JSONL (default: simulate)");
  sub->add_option("--seed", c.seed, "seed for every random choice")
      ->each([&c](const std::string&) { c.seed_set = true; });
  sub->allow_extras();
}

// Remaining "--section.key value" or "--section.key=value" tokens.
void apply_overrides(ExperimentConfig& cfg, const std::vector<std::string>& extras) {
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& tok = extras[i];
    if (tok.rfind("--", 0) != 0) {
      throw ConfigError("unexpected argument '" + tok + "'");
    }
    std::string key = tok.substr(2);
    std::string value;
    if (const auto eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key = key.substr(0, eq);
    } else {
      if (i + 1 >= extras.size()) throw ConfigError("missing value for " + tok);
      value = extras[++i];
    }
    apply_override(cfg, key, value);
  }
}

ExperimentConfig build_config(const Common& c, CLI::App* sub) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_config(c.config);
  apply_overrides(cfg, sub->remaining());
  if (!c.data.empty()) cfg.data.path = c.data;
  if (c.seed_set) cfg.seeds = {c.seed};
  cfg.validate();
  return cfg;
}

std::uint64_t run_seed(const ExperimentConfig& cfg) { return cfg.seeds.front(); }

void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw ConfigError(what + " is required");
  if (!std::filesystem::exists(path)) {
    throw ConfigError(what + " " + path + " does not exist");
  }
}

const Dataset& pick_split(const DatasetSplit& s, const std::string& name) {
  if (name == "train") return s.train;
  if (name == "val") return s.val;
  if (name == "test") return s.test;
  throw ConfigError("--split must be train, val or test");
}

AttackConfig final_attack_config(const ExperimentConfig& cfg) {
  AttackConfig ac = cfg.attack.attack;
  ac.tau = cfg.attack.tau_end;
  return ac;
}

void print_curve(const std::string& label, const std::vector<double>& v) {
  for (std::size_t e = 0; e < v.size(); ++e) {
    std::printf("%s %zu %.6f\n", label.c_str(), e, v[e]);
  }
}

int run(int argc, char** argv) {
  CLI::App app{"Adversarial attacks and defenses for marked temporal point processes"};
  app.require_subcommand(1);

  // simulate
  auto* sim = app.add_subcommand("simulate", "write a synthetic Hawkes dataset");
  Common sim_c;
  add_common(sim, sim_c, false);
  // Unset flags keep the config value.
  std::optional<double> sim_mu, sim_horizon, sim_alpha_self, sim_alpha_next, sim_beta;
  std::optional<int> sim_marks, sim_sequences, sim_max_length;
  std::string sim_out = "simulated.jsonl";
  sim->add_option("--mu", sim_mu, "base rate of every mark");
  sim->add_option("--marks", sim_marks, "number of marks");
  sim->add_option("--sequences", sim_sequences, "number of sequences");
  sim->add_option("--horizon", sim_horizon, "observation window");
  sim->add_option("--max-length", sim_max_length, "events kept per sequence");
  sim->add_option("--alpha-self", sim_alpha_self, "self excitation");
  sim->add_option("--alpha-next", sim_alpha_next, "excitation of the next mark");
  sim->add_option("--beta", sim_beta, "kernel decay");
  sim->add_option("--out", sim_out, "output JSONL");

  // train
  auto* train = app.add_subcommand("train", "clean maximum-likelihood training");
  Common train_c;
  add_common(train, train_c);
  std::string train_out;
  train->add_option("--out", train_out, "model checkpoint")->required();

  // attack-train
  auto* atrain = app.add_subcommand("attack-train", "train the permutation attack");
  Common atrain_c;
  add_common(atrain, atrain_c);
  std::string atrain_model, atrain_out;
  atrain->add_option("--model", atrain_model,
                     "adversary checkpoint (the learner for white-box, a surrogate for black-box)");
  atrain->add_option("--out", atrain_out, "attack checkpoint")->required();

  // attack-emit
  auto* emit = app.add_subcommand("attack-emit", "write adversarial sequences");
  Common emit_c;
  add_common(emit, emit_c);
  std::string emit_model, emit_attack, emit_out, emit_split = "test";
  emit->add_option("--model", emit_model, "adversary checkpoint");
  emit->add_option("--attack", emit_attack, "attack checkpoint");
  emit->add_option("--split", emit_split, "train, val or test");
  emit->add_option("--out", emit_out, "output JSONL with perm fields")->required();

  // defend
  auto* defend = app.add_subcommand("defend", "adversarial (max-min) training");
  Common defend_c;
  add_common(defend, defend_c);
  std::string defend_model, defend_out;
  defend->add_option("--model", defend_model, "warm-start checkpoint");
  defend->add_option("--out", defend_out, "defended model checkpoint")->required();

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "metrics of a learner under an attack");
  Common eval_c;
  add_common(eval, eval_c);
  std::string eval_model, eval_adversary, eval_attack, eval_match, eval_out;
  std::string eval_method = "none", eval_mode;
  eval->add_option("--model", eval_model, "learner checkpoint");
  eval->add_option("--method", eval_method, "none, permtpp, pgd, mifgsm or random")
      ->check(CLI::IsMember({"none", "permtpp", "pgd", "mifgsm", "random"}));
  eval->add_option("--attack", eval_attack, "attack checkpoint (permtpp)");
  eval->add_option("--adversary", eval_adversary,
                   "model the attack runs against (default: the learner)");
  eval->add_option("--match", eval_match,
                   "emitted JSONL whose hard distances the baselines match");
  eval->add_option("--mode", eval_mode, "mode label (default from --adversary)");
  eval->add_option("--out", eval_out, "metrics CSV")->required();

  // report
  auto* report = app.add_subcommand("report", "merge metric rows into one CSV");
  std::vector<std::string> report_in;
  std::string report_out;
  report->add_option("inputs", report_in, "metric CSV files")->required();
  report->add_option("--out", report_out, "merged CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  if (*sim) {
    ExperimentConfig cfg = sim_c.config.empty() ? ExperimentConfig{} : load_config(sim_c.config);
    apply_overrides(cfg, sim->remaining());
    DataConfig& d = cfg.data;
    d.mu = sim_mu.value_or(d.mu);
    d.marks = sim_marks.value_or(d.marks);
    d.sequences = sim_sequences.value_or(d.sequences);
    d.horizon = sim_horizon.value_or(d.horizon);
    d.max_length = sim_max_length.value_or(d.max_length);
    d.alpha_self = sim_alpha_self.value_or(d.alpha_self);
    d.alpha_next = sim_alpha_next.value_or(d.alpha_next);
    d.beta = sim_beta.value_or(d.beta);
    if (sim_c.seed_set) cfg.data.sim_seed = sim_c.seed;
    cfg.data.path.clear();
    cfg.validate();
    const Dataset ds = load_or_simulate(cfg.data);
    save_jsonl(ds, sim_out);
    std::printf("wrote %zu sequences to %s\n", ds.sequences.size(), sim_out.c_str());
    return kExitOk;
  }

  if (*train) {
    const ExperimentConfig cfg = build_config(train_c, train);
    const DatasetSplit data = split(load_or_simulate(cfg.data), cfg.data);
    const TrainResult res = train_learner(data, cfg.model, run_seed(cfg));
    print_curve("train_nll", res.train_loss);
    print_curve("val_nll", res.val_loss);
    save_mtpp(res.params, train_out);
    return kExitOk;
  }

  if (*atrain) {
    const ExperimentConfig cfg = build_config(atrain_c, atrain);
    require_file(atrain_model, "--model");
    const MtppParams adversary = load_mtpp(atrain_model);
    const DatasetSplit data = split(load_or_simulate(cfg.data), cfg.data);
    const AttackTrainResult res =
        train_attack(data.train, data.val, adversary, cfg.attack, run_seed(cfg),
                     atrain_out + ".last_good");
    print_curve("attack_loss", res.train_loss);
    print_curve("val_attack_loss", res.val_loss);
    save_attack(res.params, atrain_out);
    return kExitOk;
  }

  if (*emit) {
    const ExperimentConfig cfg = build_config(emit_c, emit);
    require_file(emit_model, "--model");
    require_file(emit_attack, "--attack");
    const MtppParams adversary = load_mtpp(emit_model);
    const AttackParams attack = load_attack(emit_attack);
    const DatasetSplit data = split(load_or_simulate(cfg.data), cfg.data);
    const Dataset& part = pick_split(data, emit_split);
    const AttackOutput out = run_permtpp(part, attack, adversary, final_attack_config(cfg));
    save_jsonl(to_dataset(out, part), emit_out);
    std::printf("mean hard distance %.6f\n", out.mean_distance());
    return kExitOk;
  }

  if (*defend) {
    const ExperimentConfig cfg = build_config(defend_c, defend);
    const DatasetSplit data = split(load_or_simulate(cfg.data), cfg.data);
    const MtppParams start = defend_model.empty()
                                 ? train_learner(data, cfg.model, run_seed(cfg)).params
                                 : (require_file(defend_model, "--model"),
                                    load_mtpp(defend_model));
    const DefenseResult res = train_defense(data, start, cfg, run_seed(cfg));
    print_curve("defense_trace", res.trace);
    save_mtpp(res.model, defend_out);
    return kExitOk;
  }

  if (*eval) {
    const ExperimentConfig cfg = build_config(eval_c, eval);
    require_file(eval_model, "--model");
    const MtppParams learner = load_mtpp(eval_model);
    const MtppParams adversary =
        eval_adversary.empty() ? learner
                               : (require_file(eval_adversary, "--adversary"),
                                  load_mtpp(eval_adversary));
    const std::string mode =
        !eval_mode.empty() ? eval_mode
        : eval_method == "none" || eval_method == "random"
            ? "none"
            : to_string(eval_adversary.empty() ? Mode::kWhiteBox : cfg.mode);
    const DatasetSplit data = split(load_or_simulate(cfg.data), cfg.data);
    const Dataset& test = data.test;
    std::vector<double> targets;
    if (!eval_match.empty()) {
      require_file(eval_match, "--match");
      const Dataset matched = load_jsonl(eval_match);
      if (matched.sequences.size() != test.sequences.size()) {
        throw ConfigError("--match has a different number of sequences than the test split");
      }
      for (std::size_t i = 0; i < test.sequences.size(); ++i) {
        targets.push_back(distance_hard(test.sequences[i], matched.sequences[i],
                                        {cfg.attack.attack.rho_c}));
      }
    }
    AttackOutput out;
    if (eval_method == "none") {
      out = no_attack(test);
    } else if (eval_method == "permtpp") {
      require_file(eval_attack, "--attack");
      out = run_permtpp(test, load_attack(eval_attack), adversary,
                        final_attack_config(cfg));
    } else if (eval_method == "random") {
      if (targets.empty()) throw ConfigError("--method random needs --match");
      out = run_random_control(test, targets, run_seed(cfg), cfg.attack.attack.rho_c);
    } else {
      const bool momentum = eval_method == "mifgsm";
      BaselineConfig bc;
      bc.steps = cfg.attack.baseline_steps;
      bc.momentum = momentum ? cfg.attack.baseline_momentum : 0.0;
      bc.lik.k_int = cfg.model.k_int;
      if (!targets.empty()) {
        double mean = 0.0;
        for (double t : targets) mean += t;
        bc = match_budget(test, adversary, bc, momentum, mean / targets.size());
      }
      out = run_baseline(test, adversary, bc, momentum);
    }
    const MetricsRow row = evaluate(test, out, learner, default_predict_options(data.train),
                                    eval_method, mode, run_seed(cfg), {cfg.model.k_int});
    const std::vector<MetricsRow> rows = {row};
    write_metrics_csv(rows, eval_out);
    std::cout << metrics_csv(rows);
    return kExitOk;
  }

  if (*report) {
    std::vector<MetricsRow> rows;
    for (const std::string& path : report_in) {
      require_file(path, "input");
      for (MetricsRow& r : read_metrics_csv(path)) rows.push_back(std::move(r));
    }
    write_metrics_csv(rows, report_out);
    // Means over seeds per (method, mode).
    std::map<std::pair<std::string, std::string>, std::vector<const MetricsRow*>> groups;
    for (const MetricsRow& r : rows) groups[{r.method, r.mode}].push_back(&r);
    std::printf("%-10s %-9s %8s %8s %10s %10s %5s\n", "method", "mode", "mae", "mpa",
                "distance", "objective", "runs");
    for (const auto& [key, g] : groups) {
      double mae = 0, mpa = 0, dist = 0, obj = 0;
      for (const MetricsRow* r : g) {
        mae += r->mae;
        mpa += r->mpa;
        dist += r->mean_distance;
        obj += r->objective;
      }
      const double n = static_cast<double>(g.size());
      std::printf("%-10s %-9s %8.4f %8.4f %10.4f %10.4f %5zu\n", key.first.c_str(),
                  key.second.c_str(), mae / n, mpa / n, dist / n, obj / n, g.size());
    }
    return kExitOk;
  }
  return kExitConfig;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const advtpp::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const advtpp::DomainError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n"
              << "run with --help for usage\n";
    return kExitConfig;
  }
}
