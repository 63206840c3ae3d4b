#include <doctest.h>

#include <random>

#include "oracles.hpp"
#include "semdvc/error.hpp"
#include "semdvc/eval.hpp"

using namespace semdvc;

namespace {

AnnotationSet one_video(std::vector<Event> events, double duration = 100.0) {
  AnnotationSet a;
  VideoAnnotation v;
  v.duration_s = duration;
  v.events = std::move(events);
  v.sentences.assign(v.events.size(), "x");
  a["v"] = v;
  return a;
}

TokenSeq toks(std::initializer_list<const char*> w) { return {w.begin(), w.end()}; }

}  // namespace

TEST_CASE("tiou examples and properties") {
  CHECK(tiou({0, 2}, {0, 2}) == 1.0);
  CHECK(tiou({0, 2}, {3, 4}) == 0.0);
  CHECK(tiou({0, 2}, {1, 3}) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 10.0);
  for (int i = 0; i < 200; ++i) {
    double a0 = u(rng), a1 = a0 + 0.1 + u(rng), b0 = u(rng), b1 = b0 + 0.1 + u(rng);
    const double x = tiou({a0, a1}, {b0, b1});
    CHECK(x == tiou({b0, b1}, {a0, a1}));
    CHECK(x >= 0.0);
    CHECK(x <= 1.0);
    CHECK(std::abs(x - oracle::interval_iou(a0, a1, b0, b1)) <= 1e-12);
  }
}

TEST_CASE("proposal scores on hand examples") {
  const auto gt = one_video({{0, 10}});
  ProposalsByVideo p{{"v", {{{0, 10}, 0.9}, {{20, 30}, 0.8}}}};
  const auto r = proposal_prf(p, gt, {0.5});
  CHECK(r.mean.precision == doctest::Approx(0.5));
  CHECK(r.mean.recall == doctest::Approx(1.0));
  CHECK(r.mean.f1 == doctest::Approx(2.0 / 3.0));

  const auto gt2 = one_video({{0, 10}, {30, 40}});
  ProposalsByVideo exact{{"v", {{{0, 10}, 0.5}, {{30, 40}, 0.4}}}};
  const auto e = proposal_prf(exact, gt2, {0.3, 0.5, 0.7, 0.9});
  CHECK(e.mean.precision == 1.0);
  CHECK(e.mean.recall == 1.0);
  CHECK(e.mean.f1 == 1.0);

  ProposalsByVideo miss{{"v", {{{50, 60}, 0.5}}}};
  const auto m = proposal_prf(miss, gt2, {0.5});
  CHECK(m.mean.f1 == 0.0);
  CHECK(proposal_prf({}, gt2, {0.5}).mean.recall == 0.0);
  CHECK_THROWS_AS(proposal_prf(p, {}, {0.5}), Error);
  CHECK_THROWS_AS(proposal_prf(p, gt, {0.0}), Error);
}

TEST_CASE("one-to-one and any-overlap rules differ on duplicates") {
  const auto gt = one_video({{0, 10}});
  ProposalsByVideo dup{{"v", {{{0, 10}, 0.9}, {{0, 10}, 0.8}}}};
  CHECK(proposal_prf(dup, gt, {0.5}).mean.precision == doctest::Approx(0.5));
  CHECK(proposal_prf(dup, gt, {0.5}, MatchRule::kAnyOverlap).mean.precision == doctest::Approx(1.0));
}

TEST_CASE("greedy matching agrees with the enumeration oracle") {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> pos(0.0, 20.0);
  std::uniform_real_distribution<double> len(0.5, 8.0);
  std::uniform_int_distribution<int> np(1, 5), ng(1, 3);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<Event> events;
    std::vector<oracle::Gt> ogt;
    for (int g = ng(rng); g > 0; --g) {
      const double s = pos(rng), e = s + len(rng);
      events.push_back({s, e});
      ogt.push_back({s, e});
    }
    std::vector<ScoredSegment> props;
    std::vector<oracle::Prop> oprops;
    for (int k = np(rng); k > 0; --k) {
      const double s = pos(rng), e = s + len(rng), c = std::uniform_real_distribution<double>(0, 1)(rng);
      props.push_back({{s, e}, c});
      oprops.push_back({s, e, c});
    }
    const auto gt = one_video(events, 40.0);
    for (double thr : {0.1, 0.3, 0.5}) {
      const double tp = static_cast<double>(oracle::greedy_tp(oprops, ogt, thr));
      const double p = tp / static_cast<double>(props.size());
      const double r = tp / static_cast<double>(events.size());
      const double f = p + r > 0 ? 2 * p * r / (p + r) : 0.0;
      const auto got = proposal_prf({{"v", props}}, gt, {thr}).mean;
      CHECK(std::abs(got.precision - p) <= 1e-9);
      CHECK(std::abs(got.recall - r) <= 1e-9);
      CHECK(std::abs(got.f1 - f) <= 1e-9);
    }
    // A proposal far from every event.
    auto more = props;
    more.push_back({{100.0, 101.0}, 0.99});
    const auto before = proposal_prf({{"v", props}}, gt, {0.5}).mean;
    const auto after = proposal_prf({{"v", more}}, gt, {0.5}).mean;
    CHECK(after.precision <= before.precision);
    CHECK(after.recall == before.recall);
  }
}

TEST_CASE("bleu examples") {
  const auto same = bleu({toks({"a", "man", "rides", "a", "horse"})}, {toks({"a", "man", "rides", "a", "horse"})});
  for (double b : same) CHECK(b == doctest::Approx(1.0));

  const auto st = bleu_stats({toks({"the", "the", "the", "the"})}, {toks({"the", "cat"})}, 1);
  CHECK(st.matched[0] == 1.0);
  CHECK(st.total[0] == 4.0);
  CHECK(bleu({toks({"the", "the", "the", "the"})}, {toks({"the", "cat"})}, 1)[0] == doctest::Approx(0.25));

  CHECK(bleu({toks({"dog", "runs"})}, {toks({"a", "cat"})})[0] == 0.0);
  CHECK_THROWS_AS(bleu({}, {}), Error);
  CHECK_THROWS_AS(bleu({toks({"a"})}, {}), Error);

  // Brevity penalty: candidate of length 2 against reference of length 4.
  const auto bp = bleu({toks({"a", "b"})}, {toks({"a", "b", "c", "d"})}, 2);
  CHECK(bp[1] == doctest::Approx(std::exp(1.0 - 2.0)).epsilon(1e-12));
}

TEST_CASE("bleu agrees with hand clipped counts, is order-free and monotone") {
  std::mt19937_64 rng(8);
  const std::vector<std::string> words{"a", "b", "c", "d"};
  std::uniform_int_distribution<int> w(0, 3), l(2, 7);
  auto sentence = [&] {
    TokenSeq s;
    for (int i = l(rng); i > 0; --i) s.push_back(words[static_cast<std::size_t>(w(rng))]);
    return s;
  };
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<TokenSeq> cand, ref;
    for (int i = 0; i < 5; ++i) {
      cand.push_back(sentence());
      ref.push_back(sentence());
    }
    const auto st = bleu_stats(cand, ref, 4);
    for (std::size_t n = 1; n <= 4; ++n) {
      double m = 0.0, t = 0.0;
      for (std::size_t i = 0; i < cand.size(); ++i) {
        const auto [mm, tt] = oracle::clipped(cand[i], ref[i], n);
        m += mm;
        t += tt;
      }
      CHECK(st.matched[n - 1] == m);
      CHECK(st.total[n - 1] == t);
    }
    const auto base = bleu(cand, ref);
    auto rc = cand, rr = ref;
    std::reverse(rc.begin(), rc.end());
    std::reverse(rr.begin(), rr.end());
    const auto rev = bleu(rc, rr);
    for (std::size_t n = 0; n < 4; ++n) CHECK(std::abs(rev[n] - base[n]) <= 1e-12);
    // Replacing a candidate by its reference never loses a clipped match.
    auto fixed = cand;
    fixed[2] = ref[2];
    const auto up = bleu_stats(fixed, ref, 4);
    for (std::size_t n = 0; n < 4; ++n) CHECK(up.matched[n] >= st.matched[n]);
    CHECK(bleu({fixed[2]}, {ref[2]})[0] == 1.0);
  }
}

TEST_CASE("corpus bleu can drop when one candidate is replaced by its reference") {
  // Fixing the long second candidate shortens the corpus below the
  // references, and the brevity penalty outweighs the precision gain.
  const std::vector<TokenSeq> ref{toks({"a", "b", "c", "d"}), toks({"x", "y"})};
  const std::vector<TokenSeq> cand{toks({"a"}), toks({"x", "y", "z"})};
  std::vector<TokenSeq> fixed = cand;
  fixed[1] = ref[1];
  CHECK(bleu(cand, ref, 1)[0] == doctest::Approx(0.75 * std::exp(-0.5)).epsilon(1e-12));
  CHECK(bleu(fixed, ref, 1)[0] == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
}

TEST_CASE("report formatting") {
  const std::vector<std::pair<std::string, double>> rows{{"f1", 0.5}, {"bleu4", 0.25}};
  CHECK(format_report_kv(rows) == "f1 0.5\nbleu4 0.25\n");
  CHECK(format_report_table(rows).find("bleu4") != std::string::npos);
}
