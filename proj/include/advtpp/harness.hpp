#ifndef ADVTPP_HARNESS_HPP_
#define ADVTPP_HARNESS_HPP_

// Experiment orchestration: learner training, attack training, adversarial
// (defense) training, white-box and black-box evaluation, and metric tables.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "advtpp/baselines.hpp"
#include "advtpp/ctes.hpp"
#include "advtpp/mtpp.hpp"
#include "advtpp/permattack.hpp"

namespace advtpp {

struct DataConfig {
  std::string path;  // JSONL dataset; empty means simulate
  // Simulator: mu on every mark, alpha[c][c] = alpha_self,
  // alpha[c][c+1 mod C] = alpha_next.
  int marks = 3;
  double mu = 0.2;
  double alpha_self = 0.05;
  double alpha_next = 0.8;
  double beta = 1.2;
  int sequences = 200;
  double horizon = 100.0;
  int max_length = 64;
  std::uint64_t sim_seed = 7;
  double train_frac = 0.7;
  double val_frac = 0.1;
  double test_frac = 0.2;
  std::uint64_t split_seed = 1;
};

struct ModelConfig {
  int dim = 8;
  int k_int = 20;
  double lr = 0.01;
  int epochs = 30;
  int batch_size = 16;
};

struct AttackTrainConfig {
  AttackConfig attack;  // tau is overwritten by the schedule
  int dim = 8;
  int hidden = 16;
  int time_dim = 8;
  int epochs = 30;
  int batch_size = 16;
  double lr = 0.01;
  double tau_start = 1.0;
  double tau_end = 0.1;
  // Steps and momentum of the gradient baselines; their budget is matched.
  int baseline_steps = 10;
  double baseline_momentum = 0.9;
};

struct DefenseConfig {
  int rounds = 15;
  int k_adv = 2;  // attack epochs per round
  int k_def = 2;  // model epochs per round
  double lr = 0.01;
};

enum class Mode { kWhiteBox, kBlackBox };

std::string to_string(Mode mode);
Mode parse_mode(const std::string& s);

struct ExperimentConfig {
  DataConfig data;
  ModelConfig model;
  AttackTrainConfig attack;
  DefenseConfig defense;
  Mode mode = Mode::kWhiteBox;
  std::vector<std::uint64_t> seeds = {0};
  std::string output_dir = "out";

  // Throws ConfigError on out-of-range values or fractions not summing to 1.
  void validate() const;
};

// Flat "key = value" text with [data] [model] [attack] [defense] sections;
// keys before any section are global. '#' starts a comment. Unknown
// sections or keys throw ConfigError.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
// key is "section.name" or a global name; throws ConfigError if unknown or
// the value does not parse.
void apply_override(ExperimentConfig& cfg, const std::string& key,
                    const std::string& value);
std::vector<std::string> config_keys();

HawkesParams hawkes_params(const DataConfig& cfg);
// Loads cfg.path, or simulates when it is empty.
Dataset load_or_simulate(const DataConfig& cfg);
DatasetSplit split(const Dataset& ds, const DataConfig& cfg);

TrainResult train_learner(const DatasetSplit& data, const ModelConfig& cfg,
                          std::uint64_t seed);

// Tau for epoch e: tau_start over the first half, then geometric to tau_end
// at the last epoch.
double tau_at(int epoch, int epochs, double tau_start, double tau_end);

struct AttackTrainResult {
  AttackParams params;
  std::vector<double> train_loss;  // mean attack_loss per epoch
  std::vector<double> val_loss;    // mean attack_loss on val after each epoch
};

// Minibatch Adam on mean attack_loss against a frozen adversary model. On a
// non-finite loss or gradient, writes the last good parameters to
// `last_good` (when given) and throws NumericError.
AttackTrainResult train_attack(const Dataset& train, const Dataset& val,
                               const MtppParams& adversary,
                               const AttackTrainConfig& cfg, std::uint64_t seed,
                               const std::filesystem::path& last_good = {});

// Continues training an existing attack for `epochs` at the given tau.
// Returns the mean loss per epoch.
std::vector<double> attack_epochs(AttackParams& params, Adam& opt,
                                  const Dataset& train,
                                  const MtppParams& adversary,
                                  const AttackTrainConfig& cfg, int epochs,
                                  double tau, std::mt19937_64& rng);

struct DefenseResult {
  MtppParams model;
  AttackParams attack;
  // One entry per phase, alternating attack phase then defense phase: the
  // mean adversarial nll at the end of the phase.
  std::vector<double> trace;
};

// Alternating max-min: each round trains the attack for k_adv epochs against
// the current model, then trains the model for k_def epochs to minimize the
// adversarial nll of clean events under the attack's emitted (detached)
// perturbations. Starts from `initial` and continues across rounds; the
// attack starts from `initial_attack` when given, else a seeded random init.
DefenseResult train_defense(const DatasetSplit& data, const MtppParams& initial,
                            const ExperimentConfig& cfg, std::uint64_t seed,
                            const AttackParams* initial_attack = nullptr);

// Gradient of the mean adversarial nll with respect to the model, for clean
// sequences conditioned on fixed perturbed histories.
GradList defense_gradient(std::span<const Sequence> clean,
                          std::span<const Sequence> perturbed,
                          const MtppParams& model,
                          const LikelihoodOptions& lik, double* loss_out);

// Perturbed histories plus the realized permutation and hard distance.
struct AttackOutput {
  std::vector<Sequence> histories;
  std::vector<std::vector<std::size_t>> perms;
  std::vector<double> distances;
  std::vector<double> hinges;  // PermTPP only; empty otherwise

  double mean_distance() const;
};

AttackOutput no_attack(const Dataset& test);
AttackOutput run_permtpp(const Dataset& test, const AttackParams& attack,
                         const MtppParams& adversary, const AttackConfig& cfg);
AttackOutput run_baseline(const Dataset& test, const MtppParams& adversary,
                          const BaselineConfig& cfg, bool momentum);
// Per-sequence targets; sequence i is matched to targets[i] (a zero target
// leaves the sequence clean).
AttackOutput run_random_control(const Dataset& test,
                                std::span<const double> targets,
                                std::uint64_t seed, double rho_c = 1.0);

// Bisection on eps_budget until the mean hard distance is within 10% of
// target. Returns the config with the closest mean distance found.
BaselineConfig match_budget(const Dataset& test, const MtppParams& adversary,
                            BaselineConfig base, bool momentum, double target);

struct MetricsRow {
  std::string method;
  std::string mode;
  double mae = 0.0;
  double mpa = 0.0;
  double mean_distance = 0.0;
  double objective = 0.0;  // mean adversarial nll of the learner
  std::uint64_t seed = 0;
};

// Scores the learner on clean test events conditioned on the attack's
// histories.
MetricsRow evaluate(const Dataset& test, const AttackOutput& out,
                    const MtppParams& learner, const PredictOptions& opts,
                    const std::string& method, const std::string& mode,
                    std::uint64_t seed,
                    const LikelihoodOptions& lik = {});

inline constexpr const char* kMetricsHeader =
    "method,mode,mae,mpa,mean_distance,objective,seed";

std::string metrics_csv(std::span<const MetricsRow> rows);
std::vector<MetricsRow> parse_metrics_csv(const std::string& text);
void write_metrics_csv(std::span<const MetricsRow> rows,
                       const std::filesystem::path& path);
std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path);

// Attack output as a dataset with one perm per sequence.
Dataset to_dataset(const AttackOutput& out, const Dataset& clean);

}  // namespace advtpp

#endif  // ADVTPP_HARNESS_HPP_
