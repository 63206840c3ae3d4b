#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "semdvc/codebook.hpp"

namespace semdvc {

struct LabelSequence {
  std::string video_id;
  LabelList labels;
};

// Sparse symmetric co-occurrence counts Z over codebook entries.
// Counts are integral when produced by count_cooccurrences; they are stored
// as doubles so the embedding trainer can also take arbitrary targets.
class CooccurrenceMatrix {
 public:
  using Key = std::pair<std::size_t, std::size_t>;

  CooccurrenceMatrix() = default;
  CooccurrenceMatrix(std::size_t k, std::size_t window) : k_(k), window_(window), row_sums_(k, 0.0) {}

  std::size_t k() const { return k_; }
  std::size_t window() const { return window_; }

  void add(std::size_t i, std::size_t j, double count);
  double at(std::size_t i, std::size_t j) const;
  double row_sum(std::size_t i) const;
  double total() const;

  // Nonzero entries in (i, j) order.
  const std::map<Key, double>& entries() const { return counts_; }
  bool empty() const { return counts_.empty(); }

  // Merges another partial count over the same (k, window).
  void merge(const CooccurrenceMatrix& other);

  bool operator==(const CooccurrenceMatrix&) const = default;

 private:
  void check(std::size_t i, std::size_t j) const;

  std::size_t k_ = 0;
  std::size_t window_ = 0;
  std::map<Key, double> counts_;
  std::vector<double> row_sums_;
};

// For every ordered position pair (p, q) within one sequence with
// 1 <= |p - q| <= window, adds one to Z[label(p)][label(q)].
CooccurrenceMatrix count_cooccurrences(const std::vector<LabelSequence>& corpus, std::size_t k,
                                       std::size_t window);

// P(j | i) = Z_ij / Z_i, zero for an empty row.
double cooccurrence_probability(const CooccurrenceMatrix& z, std::size_t i, std::size_t j);

// Text format: header "k S", then "i j count" per nonzero entry.
std::string dump_cooccurrences(const CooccurrenceMatrix& z);
CooccurrenceMatrix parse_cooccurrences(const std::string& text);
void save_cooccurrences(const std::filesystem::path& path, const CooccurrenceMatrix& z);
CooccurrenceMatrix load_cooccurrences(const std::filesystem::path& path);

}  // namespace semdvc
