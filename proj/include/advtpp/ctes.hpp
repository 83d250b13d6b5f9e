#ifndef ADVTPP_CTES_HPP_
#define ADVTPP_CTES_HPP_

// Continuous-time event sequences: the data model, the order-aware distance
// between two sequences, the perturb-then-argsort rule, padding, a Hawkes
// process simulator and the JSON Lines dataset format.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace advtpp {

struct Event {
  double t = 0.0;  // arrival time, >= 0
  int c = 0;       // mark in [0, num_marks)

  bool operator==(const Event&) const = default;
};

// A non-empty list of events with strictly increasing nonnegative times.
class Sequence {
 public:
  // Throws DataError if the invariants do not hold.
  explicit Sequence(std::vector<Event> events);

  std::size_t size() const { return events_.size(); }
  const Event& operator[](std::size_t i) const { return events_[i]; }
  const std::vector<Event>& events() const { return events_; }
  std::vector<double> times() const;
  std::vector<int> marks() const;
  int max_mark() const;

  bool operator==(const Sequence&) const = default;

 private:
  std::vector<Event> events_;
};

struct Dataset {
  std::string name;
  int num_marks = 0;
  std::vector<Sequence> sequences;
  // Optional realized permutation per sequence (adversarial outputs); either
  // empty or one entry per sequence.
  std::vector<std::vector<std::size_t>> perms;

  // Throws DataError if a mark is out of range or perms is misaligned.
  void validate() const;
};

struct DistanceParams {
  double rho_c = 1.0;  // weight of a mark mismatch, >= 0
};

// Result of adding noise to every timestamp and re-sorting.
struct NoisedSequence {
  Sequence sequence;
  // perm[i] is the original index of the event now at position i.
  std::vector<std::size_t> perm;
};

// Sorts {(t_i + eps_i, c_i)} by perturbed time. Ties keep original index
// order and are then separated by one ulp so times stay strictly increasing.
// If the minimum perturbed time is negative, every time is shifted so the
// minimum is 0.
NoisedSequence apply_noise_and_sort(const Sequence& seq,
                                    std::span<const double> eps);

// Sum over positions of |(t'_i - t'_1) - (t_i - t_1)| + rho_c [c'_i != c_i].
double distance_hard(const Sequence& clean, const Sequence& pert,
                     const DistanceParams& params);

// Same distance computed over the real (mask == 1) prefix of padded rows.
double distance_hard_masked(std::span<const double> clean_t,
                            std::span<const int> clean_c,
                            std::span<const double> pert_t,
                            std::span<const int> pert_c,
                            std::span<const std::uint8_t> mask,
                            const DistanceParams& params);

// Fixed-length batch with tail padding. The padding mark is num_marks.
struct PaddedBatch {
  std::size_t length = 0;
  int num_marks = 0;
  std::vector<std::vector<double>> times;
  std::vector<std::vector<int>> marks;
  std::vector<std::vector<std::uint8_t>> mask;

  std::size_t real_length(std::size_t row) const;
};

inline constexpr double kPadSpacing = 1.0;

PaddedBatch pad_batch(std::span<const Sequence> seqs, std::size_t length,
                      int num_marks);

// Multivariate Hawkes process with exponential kernel:
//   lambda_k(t) = mu_k + sum_{t_j < t} alpha[c_j][k] exp(-beta (t - t_j)).
struct HawkesParams {
  std::vector<double> mu;                  // one per mark
  std::vector<std::vector<double>> alpha;  // alpha[from][to]
  double beta = 1.0;

  int num_marks() const { return static_cast<int>(mu.size()); }
  // Throws ConfigError unless mu >= 0, some mu > 0 and the branching matrix
  // alpha / beta has spectral radius < 1.
  void validate() const;
};

double spectral_radius(const std::vector<std::vector<double>>& m);

// Exact sample on [0, horizon] by Ogata thinning, stopping after max_events.
// Throws DataError if no event occurred.
Sequence simulate_hawkes(const HawkesParams& params, double horizon,
                         std::uint64_t seed,
                         std::size_t max_events = static_cast<std::size_t>(-1));

// Draws `count` sequences with at least min_length events each; sequence i is
// resampled from a derived seed until it is long enough.
Dataset simulate_dataset(const HawkesParams& params, std::size_t count,
                         double horizon, std::size_t max_length,
                         std::uint64_t seed, std::string name = "hawkes",
                         std::size_t min_length = 2);

double mean_inter_event_time(const Dataset& ds);

struct DatasetSplit {
  Dataset train;
  Dataset val;
  Dataset test;
};

// Seeded shuffle followed by contiguous train/val/test slices.
DatasetSplit split_dataset(const Dataset& ds, double train_frac,
                           double val_frac, std::uint64_t seed);

Dataset load_jsonl(const std::filesystem::path& path);
// Writes to a temporary file next to path, then renames it into place.
void save_jsonl(const Dataset& ds, const std::filesystem::path& path);

}  // namespace advtpp

#endif  // ADVTPP_CTES_HPP_
