#include "advtpp/ctes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "advtpp/errors.hpp"
#include "advtpp/io.hpp"
#include "json.hpp"

namespace advtpp {

using nlohmann::json;

// -------------------------------------------------------------- Sequence

Sequence::Sequence(std::vector<Event> events) : events_(std::move(events)) {
  if (events_.empty()) throw DataError("sequence must hold at least one event");
  for (std::size_t i = 0; i < events_.size(); ++i) {
    const Event& e = events_[i];
    if (!std::isfinite(e.t) || e.t < 0) {
      throw DataError("event " + std::to_string(i) + " has invalid time " +
                      std::to_string(e.t));
    }
    if (e.c < 0) {
      throw DataError("event " + std::to_string(i) + " has negative mark");
    }
    if (i > 0 && !(events_[i - 1].t < e.t)) {
      throw DataError("times not strictly increasing at event " +
                      std::to_string(i));
    }
  }
}

std::vector<double> Sequence::times() const {
  std::vector<double> t(events_.size());
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = events_[i].t;
  return t;
}

std::vector<int> Sequence::marks() const {
  std::vector<int> c(events_.size());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = events_[i].c;
  return c;
}

int Sequence::max_mark() const {
  int m = 0;
  for (const Event& e : events_) m = std::max(m, e.c);
  return m;
}

void Dataset::validate() const {
  if (num_marks < 1) throw DataError("dataset needs at least one mark");
  for (std::size_t s = 0; s < sequences.size(); ++s) {
    if (sequences[s].max_mark() >= num_marks) {
      throw DataError("sequence " + std::to_string(s) + " uses mark " +
                      std::to_string(sequences[s].max_mark()) +
                      " but num_marks is " + std::to_string(num_marks));
    }
  }
  if (!perms.empty() && perms.size() != sequences.size()) {
    throw DataError("perms must be empty or one per sequence");
  }
  for (std::size_t s = 0; s < perms.size(); ++s) {
    if (perms[s].size() != sequences[s].size()) {
      throw DataError("perm " + std::to_string(s) + " has the wrong length");
    }
  }
}

// ------------------------------------------------------------- distances

NoisedSequence apply_noise_and_sort(const Sequence& seq,
                                    std::span<const double> eps) {
  const std::size_t n = seq.size();
  if (eps.size() != n) {
    throw DataError("noise length " + std::to_string(eps.size()) +
                    " does not match sequence length " + std::to_string(n));
  }
  std::vector<double> t(n);
  for (std::size_t i = 0; i < n; ++i) {
    t[i] = seq[i].t + eps[i];
    if (!std::isfinite(t[i])) throw DataError("perturbed time is not finite");
  }
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::stable_sort(perm.begin(), perm.end(),
                   [&](std::size_t a, std::size_t b) { return t[a] < t[b]; });
  const double shift = std::min(0.0, t[perm[0]]);
  std::vector<Event> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double ti = t[perm[i]] - shift;
    if (i > 0 && ti <= out[i - 1].t) {
      ti = std::nextafter(out[i - 1].t, std::numeric_limits<double>::infinity());
    }
    out[i] = {ti, seq[perm[i]].c};
  }
  return {Sequence(std::move(out)), std::move(perm)};
}

double distance_hard(const Sequence& clean, const Sequence& pert,
                     const DistanceParams& params) {
  if (clean.size() != pert.size()) {
    throw DataError("distance_hard: length mismatch " +
                    std::to_string(clean.size()) + " vs " +
                    std::to_string(pert.size()));
  }
  const auto ct = clean.times();
  const auto cc = clean.marks();
  const auto pt = pert.times();
  const auto pc = pert.marks();
  const std::vector<std::uint8_t> mask(ct.size(), 1);
  return distance_hard_masked(ct, cc, pt, pc, mask, params);
}

double distance_hard_masked(std::span<const double> clean_t,
                            std::span<const int> clean_c,
                            std::span<const double> pert_t,
                            std::span<const int> pert_c,
                            std::span<const std::uint8_t> mask,
                            const DistanceParams& params) {
  const std::size_t n = clean_t.size();
  if (pert_t.size() != n || clean_c.size() != n || pert_c.size() != n ||
      mask.size() != n) {
    throw DataError("distance_hard: length mismatch");
  }
  if (params.rho_c < 0) throw ConfigError("rho_c must be nonnegative");
  if (n == 0 || !mask[0]) return 0.0;
  double d = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    d += std::fabs((pert_t[i] - pert_t[0]) - (clean_t[i] - clean_t[0]));
    if (pert_c[i] != clean_c[i]) d += params.rho_c;
  }
  return d;
}

// --------------------------------------------------------------- padding

std::size_t PaddedBatch::real_length(std::size_t row) const {
  std::size_t n = 0;
  for (std::uint8_t m : mask[row]) n += m;
  return n;
}

PaddedBatch pad_batch(std::span<const Sequence> seqs, std::size_t length,
                      int num_marks) {
  PaddedBatch b;
  b.length = length;
  b.num_marks = num_marks;
  for (const Sequence& s : seqs) {
    if (s.size() > length) {
      throw DataError("sequence of length " + std::to_string(s.size()) +
                      " exceeds pad length " + std::to_string(length));
    }
    std::vector<double> t = s.times();
    std::vector<int> c = s.marks();
    std::vector<std::uint8_t> m(s.size(), 1);
    const double last = t.back();
    for (std::size_t k = 1; t.size() < length; ++k) {
      t.push_back(last + static_cast<double>(k) * kPadSpacing);
      c.push_back(num_marks);
      m.push_back(0);
    }
    b.times.push_back(std::move(t));
    b.marks.push_back(std::move(c));
    b.mask.push_back(std::move(m));
  }
  return b;
}

// ---------------------------------------------------------------- Hawkes

double spectral_radius(const std::vector<std::vector<double>>& m) {
  const std::size_t n = m.size();
  if (n == 0) return 0.0;
  std::vector<double> a(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    if (m[i].size() != n) throw ConfigError("matrix must be square");
    for (std::size_t j = 0; j < n; ++j) a[i * n + j] = m[i][j];
  }
  // Gelfand's formula via repeated squaring: ||M^k||^(1/k) with k = 2^s.
  double log_scale = 0.0;
  double k = 1.0;
  double estimate = 0.0;
  for (int step = 0; step < 40; ++step) {
    double norm = 0.0;
    for (double x : a) norm = std::max(norm, std::fabs(x));
    if (norm == 0.0) return 0.0;
    for (double& x : a) x /= norm;
    log_scale += std::log(norm);
    estimate = std::exp(log_scale / k);
    std::vector<double> sq(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t p = 0; p < n; ++p) {
        for (std::size_t j = 0; j < n; ++j) {
          sq[i * n + j] += a[i * n + p] * a[p * n + j];
        }
      }
    }
    a.swap(sq);
    log_scale *= 2.0;
    k *= 2.0;
  }
  return estimate;
}

void HawkesParams::validate() const {
  const std::size_t k = mu.size();
  if (k == 0) throw ConfigError("hawkes: need at least one mark");
  if (alpha.size() != k) throw ConfigError("hawkes: alpha must be K x K");
  if (!(beta > 0)) throw ConfigError("hawkes: beta must be positive");
  bool any_rate = false;
  for (double m : mu) {
    if (!(m >= 0) || !std::isfinite(m)) {
      throw ConfigError("hawkes: base rates must be finite and nonnegative");
    }
    any_rate = any_rate || m > 0;
  }
  if (!any_rate) throw ConfigError("hawkes: all base rates are zero, no events possible");
  std::vector<std::vector<double>> branching(k, std::vector<double>(k));
  for (std::size_t i = 0; i < k; ++i) {
    if (alpha[i].size() != k) throw ConfigError("hawkes: alpha must be K x K");
    for (std::size_t j = 0; j < k; ++j) {
      if (!(alpha[i][j] >= 0)) {
        throw ConfigError("hawkes: excitation must be nonnegative");
      }
      branching[i][j] = alpha[i][j] / beta;
    }
  }
  const double rho = spectral_radius(branching);
  if (!(rho < 1.0)) {
    throw ConfigError("hawkes: non-stationary, spectral radius of alpha/beta is " +
                      std::to_string(rho));
  }
}

Sequence simulate_hawkes(const HawkesParams& params, double horizon,
                         std::uint64_t seed, std::size_t max_events) {
  params.validate();
  if (!(horizon > 0)) throw ConfigError("hawkes: horizon must be positive");
  const std::size_t k = params.mu.size();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<double> excite(k, 0.0);
  std::vector<double> lam(k);
  std::vector<Event> events;
  double t = 0.0;
  while (events.size() < max_events) {
    double bound = 0.0;
    for (std::size_t j = 0; j < k; ++j) bound += params.mu[j] + excite[j];
    const double wait = -std::log(1.0 - unif(rng)) / bound;
    const double next = t + wait;
    if (next > horizon) break;
    const double decay = std::exp(-params.beta * wait);
    for (double& e : excite) e *= decay;
    t = next;
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      lam[j] = params.mu[j] + excite[j];
      total += lam[j];
    }
    if (unif(rng) * bound > total) continue;
    double pick = unif(rng) * total;
    std::size_t mark = 0;
    while (mark + 1 < k && pick >= lam[mark]) {
      pick -= lam[mark];
      ++mark;
    }
    if (!events.empty() && !(t > events.back().t)) continue;
    events.push_back({t, static_cast<int>(mark)});
    for (std::size_t j = 0; j < k; ++j) excite[j] += params.alpha[mark][j];
  }
  if (events.empty()) throw DataError("hawkes: no events in [0, horizon]");
  return Sequence(std::move(events));
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

Dataset simulate_dataset(const HawkesParams& params, std::size_t count,
                         double horizon, std::size_t max_length,
                         std::uint64_t seed, std::string name,
                         std::size_t min_length) {
  params.validate();
  Dataset ds;
  ds.name = std::move(name);
  ds.num_marks = params.num_marks();
  for (std::size_t i = 0; i < count; ++i) {
    bool done = false;
    for (std::uint64_t attempt = 0; attempt < 1000 && !done; ++attempt) {
      const std::uint64_t s =
          splitmix64(seed ^ splitmix64((i << 20) ^ attempt));
      try {
        Sequence seq = simulate_hawkes(params, horizon, s, max_length);
        if (seq.size() >= min_length) {
          ds.sequences.push_back(std::move(seq));
          done = true;
        }
      } catch (const DataError&) {
        // empty draw; resample
      }
    }
    if (!done) {
      throw DataError("hawkes: could not draw a sequence with at least " +
                      std::to_string(min_length) + " events");
    }
  }
  return ds;
}

double mean_inter_event_time(const Dataset& ds) {
  double total = 0.0;
  std::size_t gaps = 0;
  for (const Sequence& s : ds.sequences) {
    double prev = 0.0;
    for (const Event& e : s.events()) {
      total += e.t - prev;
      prev = e.t;
      ++gaps;
    }
  }
  return gaps ? total / static_cast<double>(gaps) : 1.0;
}

DatasetSplit split_dataset(const Dataset& ds, double train_frac,
                           double val_frac, std::uint64_t seed) {
  if (train_frac < 0 || val_frac < 0 || train_frac + val_frac > 1.0 + 1e-12) {
    throw ConfigError("split fractions must be nonnegative and sum to at most 1");
  }
  const std::size_t n = ds.sequences.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::llround(train_frac * n));
  const auto n_val = std::min(
      n - n_train, static_cast<std::size_t>(std::llround(val_frac * n)));
  DatasetSplit out;
  for (Dataset* d : {&out.train, &out.val, &out.test}) {
    d->name = ds.name;
    d->num_marks = ds.num_marks;
  }
  for (std::size_t r = 0; r < n; ++r) {
    Dataset& dst = r < n_train ? out.train
                   : r < n_train + n_val ? out.val
                                         : out.test;
    dst.sequences.push_back(ds.sequences[idx[r]]);
  }
  return out;
}

// ------------------------------------------------------------------ JSONL

Dataset load_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset " + path.string());
  Dataset ds;
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  auto fail = [&](const std::string& why) {
    throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      fail(std::string("invalid JSON: ") + e.what());
    }
    if (!header) {
      if (!obj.contains("num_marks")) fail("first line must be a header with num_marks");
      ds.num_marks = obj.at("num_marks").get<int>();
      ds.name = obj.value("name", std::string{});
      if (ds.num_marks < 1) fail("num_marks must be positive");
      header = true;
      continue;
    }
    if (!obj.contains("events") || !obj["events"].is_array()) {
      fail("missing events array");
    }
    std::vector<Event> events;
    for (const json& e : obj["events"]) {
      if (!e.is_array() || e.size() != 2) fail("event must be [t, c]");
      const double t = e[0].get<double>();
      const int c = e[1].get<int>();
      if (c < 0 || c >= ds.num_marks) fail("unknown mark " + std::to_string(c));
      if (!events.empty() && !(t > events.back().t)) {
        fail("times not strictly increasing");
      }
      events.push_back({t, c});
    }
    try {
      ds.sequences.emplace_back(std::move(events));
    } catch (const DataError& e) {
      fail(e.what());
    }
    if (obj.contains("perm")) {
      if (ds.perms.size() + 1 != ds.sequences.size()) {
        fail("perm present on some lines but not others");
      }
      ds.perms.push_back(obj["perm"].get<std::vector<std::size_t>>());
    }
  }
  if (!header) throw DataError(path.string() + ": empty dataset file");
  if (!ds.perms.empty() && ds.perms.size() != ds.sequences.size()) {
    throw DataError(path.string() + ": perm present on some lines but not others");
  }
  ds.validate();
  return ds;
}

void save_jsonl(const Dataset& ds, const std::filesystem::path& path) {
  ds.validate();
  std::ostringstream out;
  out << json{{"num_marks", ds.num_marks}, {"name", ds.name}}.dump() << '\n';
  for (std::size_t s = 0; s < ds.sequences.size(); ++s) {
    json events = json::array();
    for (const Event& e : ds.sequences[s].events()) {
      events.push_back(json::array({e.t, e.c}));
    }
    json line{{"events", std::move(events)}};
    if (!ds.perms.empty()) line["perm"] = ds.perms[s];
    out << line.dump() << '\n';
  }
  write_atomic(path, out.str());
}

}  // namespace advtpp
