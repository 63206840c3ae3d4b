#include "semdvc/codebook.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "semdvc/error.hpp"

namespace semdvc {

namespace {

void check_dim(const Codebook& cb, Eigen::Index cols) {
  if (static_cast<std::size_t>(cols) != cb.dim()) {
    throw Error(ErrorKind::kDimensionMismatch,
                "feature dimension " + std::to_string(cols) + " does not match codebook dimension " +
                    std::to_string(cb.dim()));
  }
}

std::pair<std::size_t, double> nearest(const Matrix& centers, const Eigen::Ref<const Vector>& x) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < centers.rows(); ++c) {
    const double d = (centers.row(c).transpose() - x).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<std::size_t>(c);
    }
  }
  return {best, best_d};
}

// Greedy k-means++: each step draws 2 + ln k candidates by squared distance
// and keeps the one that lowers the potential most.
Matrix kmeanspp_seed(const Matrix& points, std::size_t k, std::mt19937_64& rng) {
  const auto n = static_cast<std::size_t>(points.rows());
  const std::size_t trials = 2 + static_cast<std::size_t>(std::log(static_cast<double>(k)));
  Matrix centers(static_cast<Eigen::Index>(k), points.cols());
  auto dist_to = [&](std::size_t p) {
    return (points.rowwise() - points.row(static_cast<Eigen::Index>(p))).rowwise().squaredNorm().eval();
  };
  std::size_t pick = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  centers.row(0) = points.row(static_cast<Eigen::Index>(pick));
  Eigen::VectorXd d2 = dist_to(pick);
  for (std::size_t c = 1; c < k; ++c) {
    if (!(d2.sum() > 0.0)) {
      // Fewer distinct points than k; duplicates get reseeded as dead centers.
      pick = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
      centers.row(static_cast<Eigen::Index>(c)) = points.row(static_cast<Eigen::Index>(pick));
      continue;
    }
    std::discrete_distribution<std::size_t> dist(d2.data(), d2.data() + n);
    Eigen::VectorXd best_d2;
    double best_pot = std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < trials; ++t) {
      const std::size_t cand = dist(rng);
      Eigen::VectorXd nd = d2.cwiseMin(dist_to(cand));
      const double pot = nd.sum();
      if (pot < best_pot) {
        best_pot = pot;
        best_d2 = std::move(nd);
        pick = cand;
      }
    }
    centers.row(static_cast<Eigen::Index>(c)) = points.row(static_cast<Eigen::Index>(pick));
    d2 = std::move(best_d2);
  }
  return centers;
}

}  // namespace

Codebook fit_minibatch_kmeans(const Matrix& features, const KMeansOptions& opts,
                              KMeansReport* report) {
  if (opts.k < 1) throw Error(ErrorKind::kInvalidArgument, "k must be >= 1");
  if (opts.batch_size < 1) throw Error(ErrorKind::kInvalidArgument, "batch_size must be >= 1");
  const auto n = static_cast<std::size_t>(features.rows());
  if (n < opts.k) {
    throw Error(ErrorKind::kInvalidArgument, "need at least k=" + std::to_string(opts.k) +
                                                 " samples, got " + std::to_string(n));
  }
  if (features.cols() < 1) throw Error(ErrorKind::kDimensionMismatch, "features have zero dimension");

  std::mt19937_64 rng(opts.seed);
  // Seeds come from a sample of three batches.
  const std::size_t sample = std::min(n, 3 * std::max(opts.batch_size, opts.k));
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), 0);
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(sample);
  Matrix sampled(static_cast<Eigen::Index>(sample), features.cols());
  for (std::size_t i = 0; i < sample; ++i) {
    sampled.row(static_cast<Eigen::Index>(i)) = features.row(static_cast<Eigen::Index>(pool[i]));
  }
  Codebook cb{kmeanspp_seed(sampled, opts.k, rng)};
  if (report) {
    *report = {};
    report->initial_inertia = inertia(cb, features);
  }

  std::vector<double> counts(opts.k, 0.0);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::size_t> labels;
  std::vector<double> dists;
  Matrix sums(cb.centers.rows(), cb.centers.cols());
  std::vector<std::size_t> batch_hits(opts.k);

  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::size_t> epoch_hits(opts.k, 0);
    std::size_t last_begin = 0;
    for (std::size_t begin = 0; begin < n; begin += opts.batch_size) {
      const std::size_t end = std::min(n, begin + opts.batch_size);
      last_begin = begin;
      labels.assign(end - begin, 0);
      dists.assign(end - begin, 0.0);
      for (std::size_t i = begin; i < end; ++i) {
        auto [c, d] = nearest(cb.centers, features.row(static_cast<Eigen::Index>(order[i])).transpose());
        labels[i - begin] = c;
        dists[i - begin] = d;
      }
      // One reduction per batch: equivalent to per-sample updates with rate 1/count.
      sums.setZero();
      std::fill(batch_hits.begin(), batch_hits.end(), 0);
      for (std::size_t i = begin; i < end; ++i) {
        const std::size_t c = labels[i - begin];
        sums.row(static_cast<Eigen::Index>(c)) += features.row(static_cast<Eigen::Index>(order[i]));
        ++batch_hits[c];
      }
      for (std::size_t c = 0; c < opts.k; ++c) {
        if (batch_hits[c] == 0) continue;
        const auto m = static_cast<double>(batch_hits[c]);
        counts[c] += m;
        const auto row = static_cast<Eigen::Index>(c);
        cb.centers.row(row) += (sums.row(row) - m * cb.centers.row(row)) / counts[c];
        epoch_hits[c] += batch_hits[c];
      }
    }

    // Dead centers: move to the last batch's points farthest from their centers.
    const std::size_t last_end = std::min(n, last_begin + opts.batch_size);
    std::vector<std::size_t> far(last_end - last_begin);
    std::iota(far.begin(), far.end(), last_begin);
    std::vector<double> far_d(far.size());
    for (std::size_t i = 0; i < far.size(); ++i) {
      far_d[i] = nearest(cb.centers, features.row(static_cast<Eigen::Index>(order[far[i]])).transpose()).second;
    }
    std::vector<std::size_t> rank(far.size());
    std::iota(rank.begin(), rank.end(), 0);
    std::stable_sort(rank.begin(), rank.end(),
                     [&](std::size_t a, std::size_t b) { return far_d[a] > far_d[b]; });
    std::size_t next = 0;
    for (std::size_t c = 0; c < opts.k; ++c) {
      if (epoch_hits[c] != 0) continue;
      if (next >= rank.size() || far_d[rank[next]] <= 0.0) break;
      cb.centers.row(static_cast<Eigen::Index>(c)) =
          features.row(static_cast<Eigen::Index>(order[far[rank[next]]]));
      counts[c] = 0.0;
      ++next;
      if (report) ++report->reinitialized;
    }

    if (report) report->epoch_inertia.push_back(inertia(cb, features));
  }
  return cb;
}

std::size_t assign(const Codebook& cb, const Eigen::Ref<const Vector>& x) {
  check_dim(cb, x.size());
  if (cb.k() == 0) throw Error(ErrorKind::kInvalidArgument, "empty codebook");
  return nearest(cb.centers, x).first;
}

LabelList encode_rows(const Codebook& cb, const Matrix& rows) {
  check_dim(cb, rows.cols());
  LabelList labels(static_cast<std::size_t>(rows.rows()));
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    labels[static_cast<std::size_t>(i)] = nearest(cb.centers, rows.row(i).transpose()).first;
  }
  return labels;
}

LabelList encode_sequence(const Codebook& cb, const FeatureSequence& fs) {
  return encode_rows(cb, fs.features);
}

double inertia(const Codebook& cb, const Matrix& features) {
  check_dim(cb, features.cols());
  double total = 0.0;
  for (Eigen::Index i = 0; i < features.rows(); ++i) {
    total += nearest(cb.centers, features.row(i).transpose()).second;
  }
  return total;
}

Matrix pool_features(const std::vector<FeatureSequence>& videos) {
  Eigen::Index rows = 0;
  Eigen::Index cols = videos.empty() ? 0 : videos.front().features.cols();
  for (const auto& v : videos) {
    if (v.features.cols() != cols) {
      throw Error(ErrorKind::kDimensionMismatch, "video '" + v.video_id + "' has a different feature dimension");
    }
    rows += v.features.rows();
  }
  Matrix pooled(rows, cols);
  Eigen::Index at = 0;
  for (const auto& v : videos) {
    pooled.middleRows(at, v.features.rows()) = v.features;
    at += v.features.rows();
  }
  return pooled;
}

void save_codebook(const std::filesystem::path& dir, const Codebook& cb, const CodebookMeta& meta) {
  std::filesystem::create_directories(dir);
  save_matrix(dir / "centers.dvcf", cb.centers);
  std::ofstream out(dir / "meta.txt", std::ios::trunc);
  out << "k " << meta.k << "\n"
      << "d_vis " << meta.dim << "\n"
      << "seed " << meta.seed << "\n"
      << "epochs " << meta.epochs << "\n";
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + (dir / "meta.txt").string());
}

Codebook load_codebook(const std::filesystem::path& dir, CodebookMeta* meta) {
  Codebook cb{load_matrix(dir / "centers.dvcf")};
  std::ifstream in(dir / "meta.txt");
  if (!in) throw Error(ErrorKind::kMissingFile, "cannot open " + (dir / "meta.txt").string());
  CodebookMeta m;
  std::string key;
  while (in >> key) {
    if (key == "k") in >> m.k;
    else if (key == "d_vis") in >> m.dim;
    else if (key == "seed") in >> m.seed;
    else if (key == "epochs") in >> m.epochs;
    else throw Error(ErrorKind::kMalformed, "unknown codebook meta key '" + key + "'");
  }
  if (m.k != cb.k() || m.dim != cb.dim()) {
    throw Error(ErrorKind::kMalformed, "codebook meta does not match centers.dvcf");
  }
  if (meta) *meta = m;
  return cb;
}

}  // namespace semdvc
