#include "semdvc/cooccur.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <iterator>
#include <sstream>

#include <fmt/format.h>

#include "semdvc/error.hpp"

namespace semdvc {

void CooccurrenceMatrix::check(std::size_t i, std::size_t j) const {
  if (i >= k_ || j >= k_) {
    throw Error(ErrorKind::kOutOfRange, "co-occurrence index (" + std::to_string(i) + ", " +
                                            std::to_string(j) + ") outside k=" + std::to_string(k_));
  }
}

void CooccurrenceMatrix::add(std::size_t i, std::size_t j, double count) {
  check(i, j);
  if (count == 0.0) return;
  if (count < 0.0) throw Error(ErrorKind::kInvalidArgument, "co-occurrence counts are non-negative");
  counts_[{i, j}] += count;
  row_sums_[i] += count;
}

double CooccurrenceMatrix::at(std::size_t i, std::size_t j) const {
  check(i, j);
  auto it = counts_.find({i, j});
  return it == counts_.end() ? 0.0 : it->second;
}

double CooccurrenceMatrix::row_sum(std::size_t i) const {
  check(i, 0);
  return row_sums_[i];
}

double CooccurrenceMatrix::total() const {
  double t = 0.0;
  for (double s : row_sums_) t += s;
  return t;
}

void CooccurrenceMatrix::merge(const CooccurrenceMatrix& other) {
  if (other.k_ != k_ || other.window_ != window_) {
    throw Error(ErrorKind::kInvalidArgument, "cannot merge co-occurrence counts with different k or window");
  }
  for (const auto& [key, v] : other.counts_) add(key.first, key.second, v);
}

CooccurrenceMatrix count_cooccurrences(const std::vector<LabelSequence>& corpus, std::size_t k,
                                       std::size_t window) {
  if (window < 1) throw Error(ErrorKind::kInvalidArgument, "context window must be >= 1");
  CooccurrenceMatrix z(k, window);
  for (const auto& seq : corpus) {
    const auto& labels = seq.labels;
    for (std::size_t label : labels) {
      if (label >= k) {
        throw Error(ErrorKind::kOutOfRange, "video '" + seq.video_id + "': label " +
                                                std::to_string(label) + " >= k=" + std::to_string(k));
      }
    }
    for (std::size_t p = 0; p < labels.size(); ++p) {
      const std::size_t stop = std::min(labels.size(), p + window + 1);
      for (std::size_t q = p + 1; q < stop; ++q) {
        z.add(labels[p], labels[q], 1.0);
        z.add(labels[q], labels[p], 1.0);
      }
    }
  }
  return z;
}

double cooccurrence_probability(const CooccurrenceMatrix& z, std::size_t i, std::size_t j) {
  const double zij = z.at(i, j);
  const double zi = z.row_sum(i);
  return zi == 0.0 ? 0.0 : zij / zi;
}

std::string dump_cooccurrences(const CooccurrenceMatrix& z) {
  std::string out = fmt::format("{} {}\n", z.k(), z.window());
  for (const auto& [key, v] : z.entries()) {
    out += fmt::format("{} {} {}\n", key.first, key.second, v);
  }
  return out;
}

CooccurrenceMatrix parse_cooccurrences(const std::string& text) {
  std::istringstream in(text);
  std::size_t k = 0;
  std::size_t window = 0;
  if (!(in >> k >> window)) throw Error(ErrorKind::kMalformed, "co-occurrence header must be 'k S'");
  CooccurrenceMatrix z(k, window);
  std::size_t i = 0;
  std::size_t j = 0;
  double v = 0.0;
  while (in >> i >> j >> v) z.add(i, j, v);
  if (!in.eof()) throw Error(ErrorKind::kMalformed, "co-occurrence entries must be 'i j count'");
  return z;
}

void save_cooccurrences(const std::filesystem::path& path, const CooccurrenceMatrix& z) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  out << dump_cooccurrences(z);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
}

CooccurrenceMatrix load_cooccurrences(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kMissingFile, "cannot open " + path.string());
  return parse_cooccurrences({std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()});
}

}  // namespace semdvc
