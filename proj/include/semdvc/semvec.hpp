#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "semdvc/codebook.hpp"
#include "semdvc/cooccur.hpp"

namespace semdvc {

// Cluster vectors w, context vectors w_ctx and their biases. Row i of w is
// the semantic descriptor of cluster i.
struct EmbeddingParams {
  Matrix w;        // k x d_emb
  Matrix w_ctx;    // k x d_emb
  Vector b;        // k
  Vector b_ctx;    // k

  std::size_t k() const { return static_cast<std::size_t>(w.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(w.cols()); }
};

struct GloveHyper {
  double t_max = 100.0;
  double alpha = 0.75;
  double lr = 0.05;
  std::size_t max_iters = 1500;
  std::size_t early_stop_patience = 100;
  std::size_t d_emb = 128;
  std::uint64_t seed = 0;

  void validate() const;
};

// f(t) = (t / t_max)^alpha below t_max, 1 otherwise.
double weight(double t, double t_max = 100.0, double alpha = 0.75);

// J = sum over Z_ij > 0 of f(Z_ij) (w_i . w_ctx_j + b_i + b_ctx_j - log Z_ij)^2
double glove_loss(const EmbeddingParams& p, const CooccurrenceMatrix& z, const GloveHyper& h);

// dJ/dparams with the same layout as EmbeddingParams.
EmbeddingParams glove_gradient(const EmbeddingParams& p, const CooccurrenceMatrix& z,
                               const GloveHyper& h);

// Uniform in [-0.5/d_emb, 0.5/d_emb] for every parameter.
EmbeddingParams init_embeddings(std::size_t k, const GloveHyper& h);

struct GloveReport {
  double initial_loss = 0.0;
  double best_loss = 0.0;
  std::size_t best_iteration = 0;  // 0 means the initial parameters
  std::size_t iterations_run = 0;
  std::vector<double> loss_history;  // after each iteration
};

// Adagrad over nonzero pairs, one shuffled pass per iteration; returns the
// parameters with the lowest J seen (including the initial ones).
EmbeddingParams train_embeddings(const CooccurrenceMatrix& z, const GloveHyper& h,
                                 GloveReport* report = nullptr);

// Row w[assign(cb, x)].
Vector descriptor_for_clip(const EmbeddingParams& p, const Codebook& cb,
                           const Eigen::Ref<const Vector>& x);
// Descriptors for every row of a feature matrix.
Matrix descriptors_for_rows(const EmbeddingParams& p, const Codebook& cb, const Matrix& rows);

// [vis ; sm]
Vector build_clip_features(const Eigen::Ref<const Vector>& vis, const Eigen::Ref<const Vector>& sm);
// Row-wise concatenation for a whole sequence.
Matrix build_sequence_features(const Matrix& vis, const Matrix& sm);

// Writes w.dvcf, w_ctx.dvcf, b.dvcf, b_ctx.dvcf and meta.json.
void save_embeddings(const std::filesystem::path& dir, const EmbeddingParams& p,
                     const GloveHyper& h, double final_loss);
EmbeddingParams load_embeddings(const std::filesystem::path& dir);

}  // namespace semdvc
