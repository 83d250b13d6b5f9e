#include "advtpp/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "advtpp/errors.hpp"
#include "advtpp/io.hpp"

namespace advtpp {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const std::string v = trim(value);
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) {
    throw ConfigError("config: bad value '" + value + "' for " + key);
  }
  return out;
}

std::vector<std::uint64_t> parse_seeds(const std::string& key,
                                       const std::string& value) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    out.push_back(parse_number<std::uint64_t>(key, item));
  }
  if (out.empty()) throw ConfigError("config: " + key + " is empty");
  return out;
}

using Setter = std::function<void(ExperimentConfig&, const std::string&,
                                  const std::string&)>;

template <class T, class Field>
Setter number(Field field) {
  return [field](ExperimentConfig& c, const std::string& k, const std::string& v) {
    field(c) = parse_number<T>(k, v);
  };
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"seeds", [](ExperimentConfig& c, const std::string& k,
                   const std::string& v) { c.seeds = parse_seeds(k, v); }},
      {"output_dir", [](ExperimentConfig& c, const std::string&,
                        const std::string& v) { c.output_dir = trim(v); }},
      {"mode", [](ExperimentConfig& c, const std::string&,
                  const std::string& v) { c.mode = parse_mode(trim(v)); }},
      {"data.path", [](ExperimentConfig& c, const std::string&,
                       const std::string& v) { c.data.path = trim(v); }},
      {"data.marks", number<int>([](ExperimentConfig& c) -> auto& { return c.data.marks; })},
      {"data.mu", number<double>([](ExperimentConfig& c) -> auto& { return c.data.mu; })},
      {"data.alpha_self", number<double>([](ExperimentConfig& c) -> auto& { return c.data.alpha_self; })},
      {"data.alpha_next", number<double>([](ExperimentConfig& c) -> auto& { return c.data.alpha_next; })},
      {"data.beta", number<double>([](ExperimentConfig& c) -> auto& { return c.data.beta; })},
      {"data.sequences", number<int>([](ExperimentConfig& c) -> auto& { return c.data.sequences; })},
      {"data.horizon", number<double>([](ExperimentConfig& c) -> auto& { return c.data.horizon; })},
      {"data.max_length", number<int>([](ExperimentConfig& c) -> auto& { return c.data.max_length; })},
      {"data.sim_seed", number<std::uint64_t>([](ExperimentConfig& c) -> auto& { return c.data.sim_seed; })},
      {"data.train_frac", number<double>([](ExperimentConfig& c) -> auto& { return c.data.train_frac; })},
      {"data.val_frac", number<double>([](ExperimentConfig& c) -> auto& { return c.data.val_frac; })},
      {"data.test_frac", number<double>([](ExperimentConfig& c) -> auto& { return c.data.test_frac; })},
      {"data.split_seed", number<std::uint64_t>([](ExperimentConfig& c) -> auto& { return c.data.split_seed; })},
      {"model.dim", number<int>([](ExperimentConfig& c) -> auto& { return c.model.dim; })},
      {"model.k_int", number<int>([](ExperimentConfig& c) -> auto& { return c.model.k_int; })},
      {"model.lr", number<double>([](ExperimentConfig& c) -> auto& { return c.model.lr; })},
      {"model.epochs", number<int>([](ExperimentConfig& c) -> auto& { return c.model.epochs; })},
      {"model.batch_size", number<int>([](ExperimentConfig& c) -> auto& { return c.model.batch_size; })},
      {"attack.dim", number<int>([](ExperimentConfig& c) -> auto& { return c.attack.dim; })},
      {"attack.hidden", number<int>([](ExperimentConfig& c) -> auto& { return c.attack.hidden; })},
      {"attack.time_dim", number<int>([](ExperimentConfig& c) -> auto& { return c.attack.time_dim; })},
      {"attack.epochs", number<int>([](ExperimentConfig& c) -> auto& { return c.attack.epochs; })},
      {"attack.batch_size", number<int>([](ExperimentConfig& c) -> auto& { return c.attack.batch_size; })},
      {"attack.lr", number<double>([](ExperimentConfig& c) -> auto& { return c.attack.lr; })},
      {"attack.tau_start", number<double>([](ExperimentConfig& c) -> auto& { return c.attack.tau_start; })},
      {"attack.tau_end", number<double>([](ExperimentConfig& c) -> auto& { return c.attack.tau_end; })},
      {"attack.sinkhorn_iters", number<int>([](ExperimentConfig& c) -> auto& { return c.attack.attack.sinkhorn_iters; })},
      {"attack.rho_d", number<double>([](ExperimentConfig& c) -> auto& { return c.attack.attack.rho_d; })},
      {"attack.rho_ab", number<double>([](ExperimentConfig& c) -> auto& { return c.attack.attack.rho_ab; })},
      {"attack.rho_c", number<double>([](ExperimentConfig& c) -> auto& { return c.attack.attack.rho_c; })},
      {"attack.baseline_steps", number<int>([](ExperimentConfig& c) -> auto& { return c.attack.baseline_steps; })},
      {"attack.baseline_momentum", number<double>([](ExperimentConfig& c) -> auto& { return c.attack.baseline_momentum; })},
      {"defense.rounds", number<int>([](ExperimentConfig& c) -> auto& { return c.defense.rounds; })},
      {"defense.k_adv", number<int>([](ExperimentConfig& c) -> auto& { return c.defense.k_adv; })},
      {"defense.k_def", number<int>([](ExperimentConfig& c) -> auto& { return c.defense.k_def; })},
      {"defense.lr", number<double>([](ExperimentConfig& c) -> auto& { return c.defense.lr; })},
  };
  return table;
}

AttackConfig at_tau(AttackConfig cfg, double tau) {
  cfg.tau = tau;
  return cfg;
}

LikelihoodOptions lik_of(const ModelConfig& cfg) { return {cfg.k_int}; }

// Minibatches of indices in a fresh shuffled order.
std::vector<std::vector<std::size_t>> batches(std::size_t count, int batch_size,
                                              std::mt19937_64& rng) {
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  const auto bs = static_cast<std::size_t>(batch_size);
  for (std::size_t s = 0; s < count; s += bs) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(count, s + bs)));
  }
  return out;
}

double mean_attack_loss(const Dataset& ds, const AttackParams& attack,
                        const MtppParams& adversary, const AttackConfig& cfg) {
  double total = 0.0;
  for (const Sequence& s : ds.sequences) {
    total += attack_loss(s, attack, adversary, cfg).item();
  }
  return total / static_cast<double>(ds.sequences.size());
}

double adv_nll_value(const Sequence& clean, const Sequence& history,
                     const MtppParams& model, const LikelihoodOptions& lik) {
  const EventTensors ev = to_tensors(clean, model.num_marks);
  const auto marks = clean.marks();
  const auto hist_marks = history.marks();
  return adv_nll(ev, marks, ad::Tensor::vector(history.times()),
                 one_hot(hist_marks, model.num_marks), model, lik)
      .item();
}

double mean_adv_nll(const Dataset& clean, const AttackOutput& out,
                    const MtppParams& model, const LikelihoodOptions& lik) {
  double total = 0.0;
  for (std::size_t i = 0; i < clean.sequences.size(); ++i) {
    total += adv_nll_value(clean.sequences[i], out.histories[i], model, lik);
  }
  return total / static_cast<double>(clean.sequences.size());
}

std::string format_double(double x) {
  std::ostringstream os;
  os << std::setprecision(10) << x;
  return os.str();
}

}  // namespace

std::string to_string(Mode mode) {
  return mode == Mode::kWhiteBox ? "whitebox" : "blackbox";
}

Mode parse_mode(const std::string& s) {
  if (s == "whitebox") return Mode::kWhiteBox;
  if (s == "blackbox") return Mode::kBlackBox;
  throw ConfigError("config: mode must be whitebox or blackbox, got '" + s + "'");
}

void ExperimentConfig::validate() const {
  const DataConfig& d = data;
  if (std::fabs(d.train_frac + d.val_frac + d.test_frac - 1.0) > 1e-9) {
    throw ConfigError("config: split fractions must sum to 1");
  }
  if (d.train_frac <= 0 || d.val_frac < 0 || d.test_frac <= 0) {
    throw ConfigError("config: train and test fractions must be > 0");
  }
  if (d.path.empty()) {
    if (d.marks < 1 || d.sequences < 1 || d.max_length < 2 || !(d.horizon > 0)) {
      throw ConfigError("config: simulator needs marks, sequences >= 1, "
                        "max_length >= 2 and horizon > 0");
    }
    hawkes_params(d).validate();
  } else if (!std::filesystem::exists(d.path)) {
    throw ConfigError("config: data.path " + d.path + " does not exist");
  }
  if (model.dim < 2 || model.dim % 2 != 0) {
    throw ConfigError("config: model.dim must be even and >= 2");
  }
  if (model.k_int < 2 || model.epochs < 0 || model.batch_size < 1 ||
      !(model.lr > 0)) {
    throw ConfigError("config: model needs k_int >= 2, epochs >= 0, "
                      "batch_size >= 1, lr > 0");
  }
  attack.attack.validate();
  if (attack.dim < 2 || attack.dim % 2 != 0 || attack.hidden < 2 ||
      attack.time_dim < 0 || attack.time_dim % 2 != 0) {
    throw ConfigError("config: attack dims must be even (hidden >= 2)");
  }
  if (attack.epochs < 1 || attack.batch_size < 1 || !(attack.lr > 0) ||
      !(attack.tau_start > 0) || !(attack.tau_end > 0)) {
    throw ConfigError("config: attack needs epochs >= 1, batch_size >= 1, "
                      "lr > 0 and positive tau");
  }
  if (attack.baseline_steps < 1 || attack.baseline_momentum < 0 ||
      attack.baseline_momentum >= 1) {
    throw ConfigError("config: baseline_steps >= 1 and momentum in [0, 1)");
  }
  if (defense.rounds < 1 || defense.k_adv < 0 || defense.k_def < 0 ||
      !(defense.lr > 0)) {
    throw ConfigError("config: defense needs rounds >= 1, k_adv, k_def >= 0, lr > 0");
  }
  if (seeds.empty()) throw ConfigError("config: seeds is empty");
}

ExperimentConfig parse_config(const std::string& text) {
  static const std::vector<std::string> kSections = {"data", "model", "attack",
                                                     "defense"};
  ExperimentConfig cfg;
  std::string section;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw ConfigError("config line " + std::to_string(line_no) +
                          ": unterminated section header");
      }
      section = trim(line.substr(1, line.size() - 2));
      if (std::find(kSections.begin(), kSections.end(), section) == kSections.end()) {
        throw ConfigError("config line " + std::to_string(line_no) +
                          ": unknown section [" + section + "]");
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) +
                        ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    apply_override(cfg, section.empty() ? key : section + "." + key,
                   line.substr(eq + 1));
  }
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw ConfigError("config file " + path.string() + " does not exist");
  }
  return parse_config(read_file(path));
}

void apply_override(ExperimentConfig& cfg, const std::string& key,
                    const std::string& value) {
  const auto it = setters().find(key);
  if (it == setters().end()) throw ConfigError("config: unknown key '" + key + "'");
  it->second(cfg, key, value);
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, _] : setters()) keys.push_back(k);
  return keys;
}

HawkesParams hawkes_params(const DataConfig& cfg) {
  const auto c = static_cast<std::size_t>(std::max(cfg.marks, 0));
  HawkesParams hp;
  hp.mu.assign(c, cfg.mu);
  hp.alpha.assign(c, std::vector<double>(c, 0.0));
  for (std::size_t i = 0; i < c; ++i) {
    hp.alpha[i][i] += cfg.alpha_self;
    hp.alpha[i][(i + 1) % c] += cfg.alpha_next;
  }
  hp.beta = cfg.beta;
  return hp;
}

Dataset load_or_simulate(const DataConfig& cfg) {
  if (!cfg.path.empty()) return load_jsonl(cfg.path);
  return simulate_dataset(hawkes_params(cfg), static_cast<std::size_t>(cfg.sequences),
                          cfg.horizon, static_cast<std::size_t>(cfg.max_length),
                          cfg.sim_seed);
}

DatasetSplit split(const Dataset& ds, const DataConfig& cfg) {
  return split_dataset(ds, cfg.train_frac, cfg.val_frac, cfg.split_seed);
}

TrainResult train_learner(const DatasetSplit& data, const ModelConfig& cfg,
                          std::uint64_t seed) {
  TrainConfig tc;
  tc.adam.lr = cfg.lr;
  tc.epochs = cfg.epochs;
  tc.batch_size = cfg.batch_size;
  tc.seed = seed;
  tc.lik = lik_of(cfg);
  return train_mle(data.train, data.val,
                   MtppParams::random(data.train.num_marks, cfg.dim, seed), tc);
}

double tau_at(int epoch, int epochs, double tau_start, double tau_end) {
  const int flat = epochs / 2;
  if (epoch < flat) return tau_start;
  const int span = epochs - flat;
  const double frac = static_cast<double>(epoch - flat + 1) / span;
  return tau_start * std::pow(tau_end / tau_start, frac);
}

std::vector<double> attack_epochs(AttackParams& params, Adam& opt,
                                  const Dataset& train,
                                  const MtppParams& adversary,
                                  const AttackTrainConfig& cfg, int epochs,
                                  double tau, std::mt19937_64& rng) {
  const AttackConfig ac = at_tau(cfg.attack, tau);
  std::vector<double> losses;
  for (int e = 0; e < epochs; ++e) {
    double total = 0.0;
    for (const auto& batch : batches(train.sequences.size(), cfg.batch_size, rng)) {
      GradList g = zero_grads(params);
      const double w = 1.0 / static_cast<double>(batch.size());
      double batch_loss = 0.0;
      for (std::size_t idx : batch) {
        const Sequence& s = train.sequences[idx];
        const auto marks = s.marks();
        ad::Tape tape;
        const AttackParams bound = bind(params, tape);
        try {
          const AttackForward f = attack_forward(
              to_tensors(s, adversary.num_marks), marks, bound, adversary, ac);
          accumulate(g, collect_grads(bound, tape.backward(f.loss)), w);
          batch_loss += f.loss.item();
        } catch (const DomainError& e) {
          // NaN or overflow reaching a guarded primitive.
          throw NumericError(std::string("attack training: ") + e.what());
        }
      }
      if (!std::isfinite(batch_loss) || !all_finite(g)) {
        throw NumericError("attack training: non-finite loss");
      }
      opt.step(params, std::move(g));
      total += batch_loss;
    }
    losses.push_back(total / static_cast<double>(train.sequences.size()));
  }
  return losses;
}

AttackTrainResult train_attack(const Dataset& train, const Dataset& val,
                               const MtppParams& adversary,
                               const AttackTrainConfig& cfg, std::uint64_t seed,
                               const std::filesystem::path& last_good) {
  if (train.sequences.empty()) throw ConfigError("train_attack: empty training set");
  cfg.attack.validate();
  AttackTrainResult res;
  res.params = AttackParams::random(adversary.num_marks, adversary.dim, cfg.dim,
                                    cfg.hidden, cfg.time_dim, seed);
  Adam opt(AdamConfig{cfg.lr});
  std::mt19937_64 rng(seed);
  for (int e = 0; e < cfg.epochs; ++e) {
    const double tau = tau_at(e, cfg.epochs, cfg.tau_start, cfg.tau_end);
    try {
      res.train_loss.push_back(
          attack_epochs(res.params, opt, train, adversary, cfg, 1, tau, rng)[0]);
    } catch (const NumericError& err) {
      // attack_epochs never applies a non-finite step, so params are the last
      // good ones.
      if (!last_good.empty()) save_attack(res.params, last_good);
      throw NumericError(std::string(err.what()) + " at epoch " +
                         std::to_string(e) +
                         (last_good.empty() ? "" : "; last good parameters in " +
                                                       last_good.string()));
    }
    if (!val.sequences.empty()) {
      res.val_loss.push_back(
          mean_attack_loss(val, res.params, adversary, at_tau(cfg.attack, tau)));
    }
  }
  return res;
}

GradList defense_gradient(std::span<const Sequence> clean,
                          std::span<const Sequence> perturbed,
                          const MtppParams& model,
                          const LikelihoodOptions& lik, double* loss_out) {
  if (clean.size() != perturbed.size() || clean.empty()) {
    throw DataError("defense_gradient: need one perturbed history per sequence");
  }
  GradList g = zero_grads(model);
  const double w = 1.0 / static_cast<double>(clean.size());
  double total = 0.0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    const EventTensors ev = to_tensors(clean[i], model.num_marks);
    const auto marks = clean[i].marks();
    const auto hist_marks = perturbed[i].marks();
    ad::Tape tape;
    const MtppParams bound = bind(model, tape);
    const ad::Tensor nll =
        adv_nll(ev, marks, ad::Tensor::vector(perturbed[i].times()),
                one_hot(hist_marks, model.num_marks), bound, lik);
    accumulate(g, collect_grads(bound, tape.backward(nll)), w);
    total += nll.item();
  }
  if (loss_out) *loss_out = total * w;
  return g;
}

DefenseResult train_defense(const DatasetSplit& data, const MtppParams& initial,
                            const ExperimentConfig& cfg, std::uint64_t seed,
                            const AttackParams* initial_attack) {
  const AttackTrainConfig& ac = cfg.attack;
  const LikelihoodOptions lik = lik_of(cfg.model);
  DefenseResult res;
  res.model = initial;
  res.attack = initial_attack
                   ? *initial_attack
                   : AttackParams::random(initial.num_marks, initial.dim, ac.dim,
                                          ac.hidden, ac.time_dim, seed);
  Adam attack_opt(AdamConfig{ac.lr});
  Adam model_opt(AdamConfig{cfg.defense.lr});
  std::mt19937_64 rng(seed);
  const Dataset& train = data.train;
  const int rounds = cfg.defense.rounds;
  for (int r = 0; r < rounds; ++r) {
    const double tau = tau_at(r, rounds, ac.tau_start, ac.tau_end);
    const AttackConfig at = at_tau(ac.attack, tau);
    attack_epochs(res.attack, attack_opt, train, res.model, ac, cfg.defense.k_adv,
                  tau, rng);
    AttackOutput out = run_permtpp(train, res.attack, res.model, at);
    res.trace.push_back(mean_adv_nll(train, out, res.model, lik));
    for (int e = 0; e < cfg.defense.k_def; ++e) {
      if (e > 0) out = run_permtpp(train, res.attack, res.model, at);
      for (const auto& batch : batches(train.sequences.size(),
                                       cfg.model.batch_size, rng)) {
        std::vector<Sequence> clean, pert;
        for (std::size_t idx : batch) {
          clean.push_back(train.sequences[idx]);
          pert.push_back(out.histories[idx]);
        }
        double loss = 0.0;
        GradList g;
        try {
          g = defense_gradient(clean, pert, res.model, lik, &loss);
        } catch (const DomainError& e) {
          throw NumericError(std::string("defense: ") + e.what());
        }
        if (!std::isfinite(loss) || !all_finite(g)) {
          throw NumericError("defense: non-finite loss in round " +
                             std::to_string(r));
        }
        model_opt.step(res.model, std::move(g));
      }
    }
    res.trace.push_back(mean_adv_nll(train, out, res.model, lik));
  }
  return res;
}

double AttackOutput::mean_distance() const {
  if (distances.empty()) return 0.0;
  return std::accumulate(distances.begin(), distances.end(), 0.0) /
         static_cast<double>(distances.size());
}

AttackOutput no_attack(const Dataset& test) {
  AttackOutput out;
  for (const Sequence& s : test.sequences) {
    out.histories.push_back(s);
    std::vector<std::size_t> id(s.size());
    std::iota(id.begin(), id.end(), std::size_t{0});
    out.perms.push_back(std::move(id));
    out.distances.push_back(0.0);
  }
  return out;
}

AttackOutput run_permtpp(const Dataset& test, const AttackParams& attack,
                         const MtppParams& adversary, const AttackConfig& cfg) {
  AttackOutput out;
  for (const Sequence& s : test.sequences) {
    Emitted em = emit_adversarial(s, attack, adversary, cfg);
    out.histories.push_back(std::move(em.sequence));
    out.perms.push_back(std::move(em.perm));
    out.distances.push_back(em.distance);
    out.hinges.push_back(em.hinge);
  }
  return out;
}

AttackOutput run_baseline(const Dataset& test, const MtppParams& adversary,
                          const BaselineConfig& cfg, bool momentum) {
  AttackOutput out;
  for (const Sequence& s : test.sequences) {
    NoisedSequence ns = momentum ? mifgsm_attack(s, adversary, cfg)
                                 : pgd_attack(s, adversary, cfg);
    out.distances.push_back(distance_hard(s, ns.sequence, {}));
    out.histories.push_back(std::move(ns.sequence));
    out.perms.push_back(std::move(ns.perm));
  }
  return out;
}

AttackOutput run_random_control(const Dataset& test,
                                std::span<const double> targets,
                                std::uint64_t seed, double rho_c) {
  if (targets.size() != test.sequences.size()) {
    throw DataError("random control: one target per sequence required");
  }
  AttackOutput out;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const Sequence& s = test.sequences[i];
    if (targets[i] <= 0.0) {
      out.histories.push_back(s);
      std::vector<std::size_t> id(s.size());
      std::iota(id.begin(), id.end(), std::size_t{0});
      out.perms.push_back(std::move(id));
      out.distances.push_back(0.0);
      continue;
    }
    NoisedSequence ns = random_perm_control(s, targets[i], rng, {rho_c});
    out.distances.push_back(distance_hard(s, ns.sequence, {rho_c}));
    out.histories.push_back(std::move(ns.sequence));
    out.perms.push_back(std::move(ns.perm));
  }
  return out;
}

BaselineConfig match_budget(const Dataset& test, const MtppParams& adversary,
                            BaselineConfig base, bool momentum, double target) {
  // Step size follows the budget so every budget is reachable in `steps`.
  auto with_budget = [&](double budget) {
    BaselineConfig c = base;
    c.eps_budget = budget;
    c.step_size = 2.5 * budget / c.steps;
    return c;
  };
  auto distance = [&](double budget) {
    return run_baseline(test, adversary, with_budget(budget), momentum).mean_distance();
  };
  if (!(target > 0)) return with_budget(1e-6);
  BaselineConfig best = with_budget(base.eps_budget);
  double best_gap = std::numeric_limits<double>::infinity();
  auto consider = [&](double budget, double d) {
    const double gap = std::fabs(d - target);
    if (gap < best_gap) {
      best_gap = gap;
      best = with_budget(budget);
    }
    return gap <= 0.1 * target;
  };
  double lo = 0.0;
  double hi = base.eps_budget;
  for (int g = 0; g < 40; ++g) {
    const double d = distance(hi);
    if (consider(hi, d)) return best;
    if (d >= target) break;
    lo = hi;
    hi *= 2.0;
  }
  for (int b = 0; b < 30; ++b) {
    const double mid = 0.5 * (lo + hi);
    const double d = distance(mid);
    if (consider(mid, d)) return best;
    (d < target ? lo : hi) = mid;
  }
  return best;
}

MetricsRow evaluate(const Dataset& test, const AttackOutput& out,
                    const MtppParams& learner, const PredictOptions& opts,
                    const std::string& method, const std::string& mode,
                    std::uint64_t seed, const LikelihoodOptions& lik) {
  if (out.histories.size() != test.sequences.size()) {
    throw DataError("evaluate: one history per test sequence required");
  }
  const Metrics m = metrics(test, learner, opts, out.histories);
  return {method, mode, m.mae, m.mpa, out.mean_distance(),
          mean_adv_nll(test, out, learner, lik), seed};
}

std::string metrics_csv(std::span<const MetricsRow> rows) {
  std::string out = std::string(kMetricsHeader) + "\n";
  for (const MetricsRow& r : rows) {
    out += r.method + "," + r.mode + "," + format_double(r.mae) + "," +
           format_double(r.mpa) + "," + format_double(r.mean_distance) + "," +
           format_double(r.objective) + "," + std::to_string(r.seed) + "\n";
  }
  return out;
}

std::vector<MetricsRow> parse_metrics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || trim(line) != kMetricsHeader) {
    throw DataError("metrics csv: header must be '" + std::string(kMetricsHeader) + "'");
  }
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(trim(line));
    std::string item;
    while (std::getline(ss, item, ',')) f.push_back(item);
    if (f.size() != 7) throw DataError("metrics csv: expected 7 fields in '" + line + "'");
    try {
      rows.push_back({f[0], f[1], std::stod(f[2]), std::stod(f[3]), std::stod(f[4]),
                      std::stod(f[5]), std::stoull(f[6])});
    } catch (const std::logic_error&) {
      throw DataError("metrics csv: bad number in '" + line + "'");
    }
  }
  return rows;
}

void write_metrics_csv(std::span<const MetricsRow> rows,
                       const std::filesystem::path& path) {
  write_atomic(path, metrics_csv(rows));
}

std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path) {
  return parse_metrics_csv(read_file(path));
}

Dataset to_dataset(const AttackOutput& out, const Dataset& clean) {
  Dataset ds;
  ds.name = clean.name + "_adv";
  ds.num_marks = clean.num_marks;
  ds.sequences = out.histories;
  ds.perms = out.perms;
  ds.validate();
  return ds;
}

}  // namespace advtpp
