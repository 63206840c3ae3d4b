#include <doctest.h>

#include <random>

#include "oracles.hpp"
#include "semdvc/codebook.hpp"
#include "semdvc/error.hpp"

using namespace semdvc;

namespace {

Matrix column(std::initializer_list<double> xs) {
  Matrix m(static_cast<Eigen::Index>(xs.size()), 1);
  Eigen::Index i = 0;
  for (double x : xs) m(i++, 0) = x;
  return m;
}

}  // namespace

TEST_CASE("full-batch fit on two 1-D pairs converges to the pair means") {
  KMeansOptions opts{2, 20, 4, 3};
  Codebook cb = fit_minibatch_kmeans(column({0, 0.1, 10, 10.1}), opts);
  std::vector<double> c{cb.centers(0, 0), cb.centers(1, 0)};
  std::sort(c.begin(), c.end());
  CHECK(c[0] == doctest::Approx(0.05).epsilon(1e-6));
  CHECK(c[1] == doctest::Approx(10.05).epsilon(1e-6));
}

TEST_CASE("k equal to the number of distinct points covers them exactly") {
  const Matrix x = column({-3, 1, 4, 7.5});
  Codebook cb = fit_minibatch_kmeans(x, {4, 3, 4, 11});
  CHECK(inertia(cb, x) == doctest::Approx(0.0));
}

TEST_CASE("k=1 with the whole data as one batch gives the global mean") {
  const Matrix x = column({1, 2, 6, 11});
  Codebook cb = fit_minibatch_kmeans(x, {1, 1, 4, 0});
  CHECK(cb.centers(0, 0) == doctest::Approx(5.0));
}

TEST_CASE("assign follows the documented examples") {
  Codebook cb{Matrix(5, 2)};
  cb.centers << 5, 5, 1, 1, 2, 2, 3, 3, -1, 1;
  CHECK(assign(cb, Vector(cb.centers.row(3).transpose())) == 3);
  // (0, 1) is at squared distance 1 from center 1 and from center 4.
  Vector x(2);
  x << 0, 1;
  CHECK(assign(cb, x) == 1);
  Codebook line{column({0, 10})};
  CHECK(assign(line, Vector::Constant(1, 2.0)) == 0);
}

TEST_CASE("assign agrees with a full scan on random instances") {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> g(0, 1);
  for (int trial = 0; trial < 200; ++trial) {
    Codebook cb{Matrix::NullaryExpr(7, 3, [&] { return std::round(g(rng) * 2) / 2; })};
    Vector x = Vector::NullaryExpr(3, [&] { return std::round(g(rng) * 2) / 2; });
    CHECK(assign(cb, x) == oracle::nearest(cb.centers, x));
  }
}

TEST_CASE("encode_sequence maps every clip through assign") {
  Codebook one{Matrix::Zero(1, 2)};
  FeatureSequence fs{"v", 1.0, Matrix::Random(7, 2)};
  CHECK(encode_sequence(one, fs) == LabelList(7, 0));

  Codebook cb{Matrix::Random(4, 3)};
  FeatureSequence same{"c", 1.0, cb.centers};
  CHECK(encode_sequence(cb, same) == LabelList{0, 1, 2, 3});

  FeatureSequence rnd{"r", 1.0, Matrix::Random(9, 3)};
  const LabelList labels = encode_sequence(cb, rnd);
  for (Eigen::Index i = 0; i < 9; ++i) CHECK(labels[static_cast<std::size_t>(i)] == assign(cb, rnd.features.row(i).transpose()));
}

TEST_CASE("noise-free synthetic segments encode to their prototypes") {
  SynthConfig sc;
  sc.num_videos = 10;
  sc.noise_sigma = 0.0;
  sc.dominant_prob = 1.0;
  sc.seed = 3;
  const SynthCorpus corpus = synth_corpus(sc);
  Codebook cb{corpus.truth.prototypes};
  for (const auto& v : corpus.videos) {
    const LabelList labels = encode_sequence(cb, v);
    const auto& proto = corpus.truth.clip_prototype.at(v.video_id);
    for (std::size_t i = 0; i < labels.size(); ++i) CHECK(labels[i] == proto[i]);
    // One label per event segment.
    const auto& events = corpus.annotations.at(v.video_id).events;
    for (const auto& e : events) {
      const auto lo = static_cast<std::size_t>(std::lround(e.start_s / v.clip_duration_s));
      const auto hi = static_cast<std::size_t>(std::lround(e.end_s / v.clip_duration_s));
      for (std::size_t t = lo; t < hi; ++t) CHECK(labels[t] == labels[lo]);
    }
  }
}

TEST_CASE("inertia spot values and permutation invariance") {
  Codebook c{column({1})};
  CHECK(inertia(c, column({0, 2})) == doctest::Approx(2.0));
  Codebook cb{Matrix::Random(3, 2)};
  CHECK(inertia(cb, cb.centers) == doctest::Approx(0.0));
  Matrix x = Matrix::Random(6, 2);
  Matrix y = x.colwise().reverse();
  CHECK(inertia(cb, x) == doctest::Approx(inertia(cb, y)));
}

TEST_CASE("full-batch inertia never increases across epochs") {
  const SynthCorpus corpus = synth_corpus(SynthConfig{});
  const Matrix x = pool_features(corpus.videos);
  KMeansReport rep;
  fit_minibatch_kmeans(x, {30, 6, static_cast<std::size_t>(x.rows()), 2}, &rep);
  double prev = rep.initial_inertia;
  for (double e : rep.epoch_inertia) {
    CHECK(e <= prev + 1e-9 * prev);
    prev = e;
  }
}

TEST_CASE("mini-batch fitting at least halves the inertia of its seeds") {
  const SynthCorpus corpus = synth_corpus(SynthConfig{});
  const Matrix x = pool_features(corpus.videos);
  KMeansReport rep;
  // Seeds are noisy data points, so perfect coverage starts near twice the
  // optimum: the bound sits close to its limit and holds at the default seed.
  fit_minibatch_kmeans(x, {30, 5, 256, KMeansOptions{}.seed}, &rep);
  CHECK(rep.epoch_inertia.back() <= 0.5 * rep.initial_inertia);
}

TEST_CASE("codebook fitting rejects bad arguments") {
  CHECK_THROWS_AS(fit_minibatch_kmeans(column({1, 2}), {3, 1, 2, 0}), Error);
  CHECK_THROWS_AS(fit_minibatch_kmeans(column({1, 2}), {0, 1, 2, 0}), Error);
}
