#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "semdvc/dataset.hpp"

namespace semdvc {

using LabelList = std::vector<std::size_t>;

// Visual vocabulary: k cluster centers over clip features.
struct Codebook {
  Matrix centers;  // k x d_vis

  std::size_t k() const { return static_cast<std::size_t>(centers.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(centers.cols()); }
};

struct KMeansOptions {
  std::size_t k = 1500;
  std::size_t epochs = 5;
  std::size_t batch_size = 1024;
  std::uint64_t seed = 0;
};

struct KMeansReport {
  double initial_inertia = 0.0;
  std::vector<double> epoch_inertia;  // after each epoch, over all samples
  std::size_t reinitialized = 0;      // dead centers moved during fitting
};

// Mini-batch k-means with k-means++ seeding. Per-center counts accumulate
// over the whole run, so each center is the running mean of every sample
// ever assigned to it; with batch_size >= rows this is Lloyd on the first
// epoch and a damped Lloyd afterwards. Centers that receive no sample during
// an epoch are moved to the last batch's point farthest from its center.
Codebook fit_minibatch_kmeans(const Matrix& features, const KMeansOptions& opts,
                              KMeansReport* report = nullptr);

// Nearest center by squared Euclidean distance; ties go to the lowest label.
std::size_t assign(const Codebook& cb, const Eigen::Ref<const Vector>& x);
LabelList encode_sequence(const Codebook& cb, const FeatureSequence& fs);
LabelList encode_rows(const Codebook& cb, const Matrix& rows);
double inertia(const Codebook& cb, const Matrix& features);

// Stacks every sequence's clip features into one matrix.
Matrix pool_features(const std::vector<FeatureSequence>& videos);

struct CodebookMeta {
  std::size_t k = 0;
  std::size_t dim = 0;
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
};

// Writes centers.dvcf and meta.txt into dir.
void save_codebook(const std::filesystem::path& dir, const Codebook& cb, const CodebookMeta& meta);
Codebook load_codebook(const std::filesystem::path& dir, CodebookMeta* meta = nullptr);

}  // namespace semdvc
