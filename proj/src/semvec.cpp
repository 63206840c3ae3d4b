#include "semdvc/semvec.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <json.hpp>

#include "semdvc/error.hpp"

namespace semdvc {

void GloveHyper::validate() const {
  if (!(t_max > 0.0)) throw Error(ErrorKind::kValidation, "t_max must be > 0");
  if (!(alpha > 0.0 && alpha <= 1.0)) throw Error(ErrorKind::kValidation, "alpha must be in (0, 1]");
  if (!(lr > 0.0)) throw Error(ErrorKind::kValidation, "lr must be > 0");
  if (d_emb < 1) throw Error(ErrorKind::kValidation, "d_emb must be >= 1");
}

double weight(double t, double t_max, double alpha) {
  if (t < 0.0) throw Error(ErrorKind::kInvalidArgument, "weight of a negative count");
  return t < t_max ? std::pow(t / t_max, alpha) : 1.0;
}

namespace {

void check_shapes(const EmbeddingParams& p, const CooccurrenceMatrix& z) {
  if (p.w.rows() != p.w_ctx.rows() || p.w.cols() != p.w_ctx.cols() || p.b.size() != p.w.rows() ||
      p.b_ctx.size() != p.w.rows()) {
    throw Error(ErrorKind::kDimensionMismatch, "embedding parameter blocks have inconsistent shapes");
  }
  if (p.k() != z.k()) {
    throw Error(ErrorKind::kDimensionMismatch, "embedding k=" + std::to_string(p.k()) +
                                                   " but co-occurrence k=" + std::to_string(z.k()));
  }
}

double residual(const EmbeddingParams& p, std::size_t i, std::size_t j, double zij) {
  const auto ri = static_cast<Eigen::Index>(i);
  const auto rj = static_cast<Eigen::Index>(j);
  return p.w.row(ri).dot(p.w_ctx.row(rj)) + p.b(ri) + p.b_ctx(rj) - std::log(zij);
}

}  // namespace

double glove_loss(const EmbeddingParams& p, const CooccurrenceMatrix& z, const GloveHyper& h) {
  check_shapes(p, z);
  double j = 0.0;
  for (const auto& [key, zij] : z.entries()) {
    const double r = residual(p, key.first, key.second, zij);
    j += weight(zij, h.t_max, h.alpha) * r * r;
  }
  return j;
}

EmbeddingParams glove_gradient(const EmbeddingParams& p, const CooccurrenceMatrix& z,
                               const GloveHyper& h) {
  check_shapes(p, z);
  EmbeddingParams g{Matrix::Zero(p.w.rows(), p.w.cols()), Matrix::Zero(p.w.rows(), p.w.cols()),
                    Vector::Zero(p.b.size()), Vector::Zero(p.b.size())};
  for (const auto& [key, zij] : z.entries()) {
    const auto i = static_cast<Eigen::Index>(key.first);
    const auto j = static_cast<Eigen::Index>(key.second);
    const double coef = 2.0 * weight(zij, h.t_max, h.alpha) * residual(p, key.first, key.second, zij);
    g.w.row(i) += coef * p.w_ctx.row(j);
    g.w_ctx.row(j) += coef * p.w.row(i);
    g.b(i) += coef;
    g.b_ctx(j) += coef;
  }
  return g;
}

EmbeddingParams init_embeddings(std::size_t k, const GloveHyper& h) {
  h.validate();
  std::mt19937_64 rng(h.seed);
  const double scale = 0.5 / static_cast<double>(h.d_emb);
  std::uniform_real_distribution<double> u(-scale, scale);
  const auto kk = static_cast<Eigen::Index>(k);
  const auto d = static_cast<Eigen::Index>(h.d_emb);
  EmbeddingParams p{Matrix(kk, d), Matrix(kk, d), Vector(kk), Vector(kk)};
  for (Eigen::Index i = 0; i < kk; ++i)
    for (Eigen::Index c = 0; c < d; ++c) p.w(i, c) = u(rng);
  for (Eigen::Index i = 0; i < kk; ++i)
    for (Eigen::Index c = 0; c < d; ++c) p.w_ctx(i, c) = u(rng);
  for (Eigen::Index i = 0; i < kk; ++i) p.b(i) = u(rng);
  for (Eigen::Index i = 0; i < kk; ++i) p.b_ctx(i) = u(rng);
  return p;
}

EmbeddingParams train_embeddings(const CooccurrenceMatrix& z, const GloveHyper& h, GloveReport* report) {
  h.validate();
  if (z.empty()) throw Error(ErrorKind::kInvalidArgument, "co-occurrence matrix has no nonzero entry");

  struct Pair {
    Eigen::Index i;
    Eigen::Index j;
    double log_z;
    double f;
  };
  std::vector<Pair> pairs;
  pairs.reserve(z.entries().size());
  for (const auto& [key, zij] : z.entries()) {
    pairs.push_back({static_cast<Eigen::Index>(key.first), static_cast<Eigen::Index>(key.second),
                     std::log(zij), weight(zij, h.t_max, h.alpha)});
  }

  EmbeddingParams p = init_embeddings(z.k(), h);
  // Squared-gradient accumulators, started at one as in the reference GloVe trainer.
  EmbeddingParams acc{Matrix::Ones(p.w.rows(), p.w.cols()), Matrix::Ones(p.w.rows(), p.w.cols()),
                      Vector::Ones(p.b.size()), Vector::Ones(p.b.size())};

  GloveReport rep;
  rep.initial_loss = glove_loss(p, z, h);
  rep.best_loss = rep.initial_loss;
  EmbeddingParams best = p;
  std::mt19937_64 rng(h.seed ^ 0x9E3779B97F4A7C15ull);
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t since_best = 0;

  Eigen::RowVectorXd gw;
  Eigen::RowVectorXd gc;
  for (std::size_t iter = 1; iter <= h.max_iters; ++iter) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t idx : order) {
      const Pair& pr = pairs[idx];
      const double r = p.w.row(pr.i).dot(p.w_ctx.row(pr.j)) + p.b(pr.i) + p.b_ctx(pr.j) - pr.log_z;
      const double coef = 2.0 * pr.f * r;
      gw = coef * p.w_ctx.row(pr.j);
      gc = coef * p.w.row(pr.i);
      acc.w.row(pr.i).array() += gw.array().square();
      acc.w_ctx.row(pr.j).array() += gc.array().square();
      acc.b(pr.i) += coef * coef;
      acc.b_ctx(pr.j) += coef * coef;
      p.w.row(pr.i).array() -= h.lr * gw.array() / acc.w.row(pr.i).array().sqrt();
      p.w_ctx.row(pr.j).array() -= h.lr * gc.array() / acc.w_ctx.row(pr.j).array().sqrt();
      p.b(pr.i) -= h.lr * coef / std::sqrt(acc.b(pr.i));
      p.b_ctx(pr.j) -= h.lr * coef / std::sqrt(acc.b_ctx(pr.j));
    }
    const double j = glove_loss(p, z, h);
    rep.loss_history.push_back(j);
    rep.iterations_run = iter;
    if (!std::isfinite(j)) break;
    if (j < rep.best_loss) {
      rep.best_loss = j;
      rep.best_iteration = iter;
      best = p;
      since_best = 0;
    } else if (++since_best >= h.early_stop_patience) {
      break;
    }
  }
  if (report) *report = std::move(rep);
  return best;
}

Vector descriptor_for_clip(const EmbeddingParams& p, const Codebook& cb, const Eigen::Ref<const Vector>& x) {
  if (p.k() != cb.k()) {
    throw Error(ErrorKind::kDimensionMismatch, "embedding and codebook disagree on k");
  }
  return p.w.row(static_cast<Eigen::Index>(assign(cb, x))).transpose();
}

Matrix descriptors_for_rows(const EmbeddingParams& p, const Codebook& cb, const Matrix& rows) {
  if (p.k() != cb.k()) {
    throw Error(ErrorKind::kDimensionMismatch, "embedding and codebook disagree on k");
  }
  const LabelList labels = encode_rows(cb, rows);
  Matrix out(rows.rows(), p.w.cols());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = p.w.row(static_cast<Eigen::Index>(labels[i]));
  }
  return out;
}

Vector build_clip_features(const Eigen::Ref<const Vector>& vis, const Eigen::Ref<const Vector>& sm) {
  Vector v(vis.size() + sm.size());
  v << vis, sm;
  return v;
}

Matrix build_sequence_features(const Matrix& vis, const Matrix& sm) {
  if (vis.rows() != sm.rows()) {
    throw Error(ErrorKind::kDimensionMismatch, "visual and semantic sequences differ in length");
  }
  Matrix out(vis.rows(), vis.cols() + sm.cols());
  out << vis, sm;
  return out;
}

void save_embeddings(const std::filesystem::path& dir, const EmbeddingParams& p, const GloveHyper& h,
                     double final_loss) {
  std::filesystem::create_directories(dir);
  save_matrix(dir / "w.dvcf", p.w);
  save_matrix(dir / "w_ctx.dvcf", p.w_ctx);
  save_matrix(dir / "b.dvcf", Matrix(p.b));
  save_matrix(dir / "b_ctx.dvcf", Matrix(p.b_ctx));
  nlohmann::ordered_json meta;
  meta["k"] = p.k();
  meta["d_emb"] = p.dim();
  meta["t_max"] = h.t_max;
  meta["alpha"] = h.alpha;
  meta["lr"] = h.lr;
  meta["max_iters"] = h.max_iters;
  meta["early_stop_patience"] = h.early_stop_patience;
  meta["seed"] = h.seed;
  meta["final_loss"] = final_loss;
  std::ofstream out(dir / "meta.json", std::ios::trunc);
  out << meta.dump(1) << "\n";
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + (dir / "meta.json").string());
}

EmbeddingParams load_embeddings(const std::filesystem::path& dir) {
  EmbeddingParams p;
  p.w = load_matrix(dir / "w.dvcf");
  p.w_ctx = load_matrix(dir / "w_ctx.dvcf");
  p.b = load_matrix(dir / "b.dvcf").col(0);
  p.b_ctx = load_matrix(dir / "b_ctx.dvcf").col(0);
  if (p.w_ctx.rows() != p.w.rows() || p.w_ctx.cols() != p.w.cols() || p.b.size() != p.w.rows() ||
      p.b_ctx.size() != p.w.rows()) {
    throw Error(ErrorKind::kMalformed, dir.string() + ": embedding blocks have inconsistent shapes");
  }
  return p;
}

}  // namespace semdvc
