// Independent reference computations used by the tests. Nothing here calls
// into the library's algorithms; they are written the slow, obvious way.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace oracle {

using Matrix = Eigen::MatrixXd;

// Every ordered pair of positions at distance 1..S inside each sequence.
inline std::map<std::pair<std::size_t, std::size_t>, double> cooccur(
    const std::vector<std::vector<std::size_t>>& seqs, std::size_t window) {
  std::map<std::pair<std::size_t, std::size_t>, double> z;
  for (const auto& s : seqs) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      for (std::size_t j = 0; j < s.size(); ++j) {
        const std::size_t gap = i > j ? i - j : j - i;
        if (gap >= 1 && gap <= window) z[{s[i], s[j]}] += 1.0;
      }
    }
  }
  return z;
}

// Nearest row of `centers` by full scan; the first one wins ties.
inline std::size_t nearest(const Matrix& centers, const Eigen::VectorXd& x) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index r = 0; r < centers.rows(); ++r) {
    double d = 0.0;
    for (Eigen::Index c = 0; c < centers.cols(); ++c) d += (centers(r, c) - x(c)) * (centers(r, c) - x(c));
    if (d < best_d) {
      best_d = d;
      best = static_cast<std::size_t>(r);
    }
  }
  return best;
}

inline double interval_iou(double a0, double a1, double b0, double b1) {
  const double inter = std::max(0.0, std::min(a1, b1) - std::max(a0, b0));
  const double uni = std::max(a1, b1) - std::min(a0, b0);
  return uni > 0.0 ? inter / uni : 0.0;
}

struct Prop {
  double start, end, conf;
};
struct Gt {
  double start, end;
};

// Greedy one-to-one matching written out per the definition; returns TP.
inline std::size_t greedy_tp(std::vector<Prop> props, const std::vector<Gt>& gt, double thr) {
  std::stable_sort(props.begin(), props.end(), [](const Prop& a, const Prop& b) { return a.conf > b.conf; });
  std::vector<bool> taken(gt.size(), false);
  std::size_t tp = 0;
  for (const auto& p : props) {
    int pick = -1;
    double pick_iou = 0.0;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const double iou = interval_iou(p.start, p.end, gt[g].start, gt[g].end);
      if (taken[g] || iou < thr) continue;
      if (pick < 0 || iou > pick_iou) {
        pick = static_cast<int>(g);
        pick_iou = iou;
      }
    }
    if (pick >= 0) {
      taken[static_cast<std::size_t>(pick)] = true;
      ++tp;
    }
  }
  return tp;
}

// Clipped n-gram matches and candidate n-gram count for one sentence pair.
inline std::pair<double, double> clipped(const std::vector<std::string>& cand, const std::vector<std::string>& ref,
                                         std::size_t n) {
  auto grams = [n](const std::vector<std::string>& s) {
    std::map<std::vector<std::string>, double> g;
    for (std::size_t i = 0; i + n <= s.size(); ++i) g[{s.begin() + i, s.begin() + i + n}] += 1.0;
    return g;
  };
  const auto c = grams(cand);
  const auto r = grams(ref);
  double match = 0.0;
  double total = 0.0;
  for (const auto& [g, k] : c) {
    total += k;
    auto it = r.find(g);
    if (it != r.end()) match += std::min(k, it->second);
  }
  return {match, total};
}

// Lowest within-cluster sum of squares over every split of the sorted
// values into k contiguous runs (optimal clusters in 1-D are contiguous).
inline double best_1d_sse(std::vector<double> xs, std::size_t k) {
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  auto cost = [&](std::size_t lo, std::size_t hi) {
    double mean = 0.0;
    for (std::size_t i = lo; i < hi; ++i) mean += xs[i];
    mean /= static_cast<double>(hi - lo);
    double s = 0.0;
    for (std::size_t i = lo; i < hi; ++i) s += (xs[i] - mean) * (xs[i] - mean);
    return s;
  };
  double best = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> cuts(k - 1);
  std::function<void(std::size_t, std::size_t)> rec = [&](std::size_t depth, std::size_t from) {
    if (depth == k - 1) {
      double total = 0.0;
      std::size_t lo = 0;
      for (std::size_t c : cuts) {
        total += cost(lo, c);
        lo = c;
      }
      total += cost(lo, n);
      best = std::min(best, total);
      return;
    }
    for (std::size_t c = from; c + (k - 2 - depth) <= n - 1; ++c) {
      cuts[depth] = c;
      rec(depth + 1, c + 1);
    }
  };
  if (k == 1) return cost(0, n);
  rec(0, 1);
  return best;
}

// Central differences on selected entries of named parameter blocks.
struct GradCheck {
  double max_block_rel = 0.0;  // worst per-block relative error
  double global_rel = 0.0;
  std::string worst_block;
  std::size_t entries = 0;
};

// Entries are perturbed in place and `loss` re-evaluated on each.
template <typename Store, typename GradMap>
GradCheck check_gradients(Store& params, const GradMap& analytic, const std::function<double()>& loss,
                          std::size_t per_block = 8, double h = 1e-5) {
  GradCheck out;
  double num_sq = 0.0;
  double den_a = 0.0;
  double den_n = 0.0;
  for (auto& [name, value] : params.values()) {
    const Eigen::Index size = value.size();
    if (size == 0) continue;
    Matrix a = Matrix::Zero(value.rows(), value.cols());
    auto it = analytic.find(name);
    if (it != analytic.end()) a = it->second;
    const std::size_t step = std::max<std::size_t>(1, static_cast<std::size_t>(size) / per_block);
    double bd = 0.0;
    double ba = 0.0;
    double bn = 0.0;
    for (Eigen::Index i = 0; i < size; i += static_cast<Eigen::Index>(step)) {
      const double keep = value.data()[i];
      value.data()[i] = keep + h;
      const double up = loss();
      value.data()[i] = keep - h;
      const double down = loss();
      value.data()[i] = keep;
      const double numeric = (up - down) / (2.0 * h);
      const double an = a.data()[i];
      bd += (an - numeric) * (an - numeric);
      ba += an * an;
      bn += numeric * numeric;
      ++out.entries;
    }
    num_sq += bd;
    den_a += ba;
    den_n += bn;
    const double scale = std::sqrt(ba) + std::sqrt(bn);
    if (scale > 1e-9) {
      const double rel = std::sqrt(bd) / scale;
      if (rel > out.max_block_rel) {
        out.max_block_rel = rel;
        out.worst_block = name;
      }
    }
  }
  const double scale = std::sqrt(den_a) + std::sqrt(den_n);
  out.global_rel = scale > 0.0 ? std::sqrt(num_sq) / scale : 0.0;
  return out;
}

inline double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double na = a.norm();
  const double nb = b.norm();
  return na > 0.0 && nb > 0.0 ? a.dot(b) / (na * nb) : 0.0;
}

}  // namespace oracle
