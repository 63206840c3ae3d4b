#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "scratch.hpp"
#include "semdvc/error.hpp"
#include "semdvc/proposals.hpp"

using namespace semdvc;
using Eigen::Index;

namespace {

ProposalConfig tiny_cfg(std::size_t anchors, std::vector<std::size_t> kernels) {
  ProposalConfig c;
  c.num_anchors = anchors;
  c.kernel_sizes = std::move(kernels);
  c.hidden = 4;
  return c;
}

// Perturbs every head parameter so biases and deeper layers carry signal.
void jitter(ProposalHeads& h, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (auto& [name, v] : h.params.values()) v = v.unaryExpr([&](double x) { return x + u(rng); });
}

}  // namespace

TEST_CASE("anchor fitting examples") {
  CHECK(fit_anchors(std::vector<double>{1, 1, 9, 9}, 2).priors == std::vector<double>{1, 9});
  CHECK(fit_anchors(std::vector<double>{3.5, 3.5, 3.5}, 1).priors == std::vector<double>{3.5});
  const auto a = fit_anchors(std::vector<double>{7, 1, 4, 9, 2, 8, 3}, 3);
  CHECK(std::is_sorted(a.priors.begin(), a.priors.end()));
  CHECK_THROWS_AS(fit_anchors(std::vector<double>{1, 2}, 3), Error);
  CHECK_THROWS_AS(fit_anchors(std::vector<double>{1, -2}, 1), Error);
}

TEST_CASE("anchor fitting reaches the best contiguous partition on small instances") {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(0.5, 30.0);
  std::uniform_int_distribution<int> n_dist(3, 10);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> xs(static_cast<std::size_t>(n_dist(rng)));
    for (double& x : xs) x = u(rng);
    const std::size_t k = 1 + static_cast<std::size_t>(trial) % std::min<std::size_t>(4, xs.size());
    const auto a = fit_anchors(xs, k, static_cast<std::uint64_t>(trial));
    CHECK(std::abs(anchor_sse(xs, a.priors) - oracle::best_1d_sse(xs, k)) <= 1e-9);
  }
}

TEST_CASE("anchor groups are contiguous and cover every anchor") {
  CHECK(anchor_groups(10, 3) == std::vector<std::size_t>{4, 3, 3});
  CHECK(anchor_groups(2, 1) == std::vector<std::size_t>{2});
}

TEST_CASE("decoding zero logits") {
  const AnchorSet anchors{{1.0, 4.0}};
  const auto g = decode_grid(Matrix::Zero(5, 6), anchors, 2.0);
  CHECK(g.confidence.size() == 10);
  for (Index t = 0; t < 5; ++t) {
    for (Index a = 0; a < 2; ++a) {
      CHECK(g.center_s(t, a) == doctest::Approx((static_cast<double>(t) + 0.5) * 2.0));
      CHECK(g.length_s(t, a) == doctest::Approx(anchors.priors[static_cast<std::size_t>(a)]));
      CHECK(g.confidence(t, a) == 0.5);
    }
  }
  CHECK(g.start_s(0, 1) == 0.0);  // 1 - 2 clamped
  CHECK_THROWS_AS(decode_grid(Matrix::Zero(0, 6), anchors, 2.0), Error);
}

TEST_CASE("centers stay inside their cell and intervals inside the video") {
  const AnchorSet anchors{{0.5, 3.0, 20.0}};
  const Matrix logits = Matrix::Random(6, 9) * 8.0;
  const auto g = decode_grid(logits, anchors, 1.5);
  for (Index t = 0; t < 6; ++t) {
    for (Index a = 0; a < 3; ++a) {
      CHECK(g.center_s(t, a) >= static_cast<double>(t) * 1.5);
      CHECK(g.center_s(t, a) <= static_cast<double>(t + 1) * 1.5);
      CHECK(g.start_s(t, a) >= 0.0);
      CHECK(g.end_s(t, a) <= 9.0);
      CHECK(g.length_s(t, a) > 0.0);
    }
  }
}

TEST_CASE("event matching") {
  const AnchorSet anchors{{2.0, 6.0}};
  const auto m = match_event({2.5, 8.5}, anchors, 2.0, 10);
  CHECK(m.cell == 2);
  CHECK(m.anchor == 1);
  CHECK(m.offset == doctest::Approx(0.25));
  CHECK(m.log_length == doctest::Approx(0.0));
  const auto edge = match_event({0.0, 1.0}, anchors, 2.0, 10);
  CHECK(edge.cell == 0);
  CHECK(edge.offset == doctest::Approx(-0.25));
  CHECK(edge.log_length == doctest::Approx(std::log(0.5)));
}

TEST_CASE("grid loss gradient matches central differences") {
  const AnchorSet anchors{{1.0, 3.0}};
  const std::vector<Event> events{{0.2, 1.4}, {2.5, 5.5}};
  ag::ParamStore p;
  p.set("z", Matrix::Random(4, 6));
  Matrix d;
  grid_loss(p.at("z"), events, anchors, 1.5, 0.1, &d);
  const auto res = oracle::check_gradients(p, ag::ParamMap{{"z", d}},
                                           [&] { return grid_loss(p.at("z"), events, anchors, 1.5, 0.1); }, 24);
  CHECK(res.max_block_rel < 1e-7);
}

TEST_CASE("proposal head gradients on a 4-cell, 2-anchor head") {
  ProposalHeads h = make_proposal_heads(tiny_cfg(2, {3}), 3, 5);
  jitter(h, 6);
  const AnchorSet anchors{{1.0, 3.0}};
  const BimodalMemory mem{Matrix::Random(4, 3), Matrix::Random(4, 3)};
  const std::vector<Event> events{{0.2, 1.4}, {2.5, 5.5}};
  ag::ParamMap grads;
  proposal_loss(h, mem, events, anchors, 1.5, &grads);
  const auto res =
      oracle::check_gradients(h.params, grads, [&] { return proposal_loss(h, mem, events, anchors, 1.5); }, 16);
  CAPTURE(res.worst_block);
  CHECK(res.max_block_rel < 1e-4);
}

TEST_CASE("selection keeps modality proportions and ordering") {
  const AnchorSet anchors{{1.0, 2.0}};
  const auto v = decode_grid(Matrix::Random(5, 6), anchors, 1.0);
  const auto s = decode_grid(Matrix::Random(5, 6), anchors, 1.0);
  for (std::size_t n : {1u, 4u, 7u, 10u}) {
    const auto list = select_proposals("vid", v, s, n);
    std::size_t nv = 0;
    for (const auto& p : list.proposals) nv += p.modality == Modality::kVisual;
    CHECK(list.proposals.size() == n);
    CHECK(nv == (n + 1) / 2);
    CHECK(!list.shortfall);
    for (std::size_t i = 1; i < list.proposals.size(); ++i) {
      CHECK(list.proposals[i - 1].confidence >= list.proposals[i].confidence);
    }
    for (const auto& p : list.proposals) {
      CHECK(p.start_s() >= -1e-12);
      CHECK(p.end_s() <= 5.0 + 1e-12);
    }
  }
  const auto all = select_proposals("vid", v, s, 50);
  CHECK(all.shortfall);
  CHECK(all.proposals.size() == 20);
}

TEST_CASE("ties go to the earlier center, then to the visual stream") {
  const AnchorSet anchors{{1.0}};
  const auto g = decode_grid(Matrix::Zero(3, 3), anchors, 1.0);
  const auto list = select_proposals("vid", g, g, 4);
  REQUIRE(list.proposals.size() == 4);
  CHECK(list.proposals[0].center_s == 0.5);
  CHECK(list.proposals[0].modality == Modality::kVisual);
  CHECK(list.proposals[1].modality == Modality::kSemantic);
  CHECK(list.proposals[2].center_s == 1.5);
}

TEST_CASE("text round trip and head persistence") {
  std::vector<Proposal> ps{{"a", 1.25, 0.5, 0.75, Modality::kVisual}, {"a", 3.0, 2.0, 0.125, Modality::kSemantic}};
  const auto back = parse_proposals(format_proposals(ps));
  REQUIRE(back.size() == 2);
  CHECK(back[1].modality == Modality::kSemantic);
  CHECK(back[0].center_s == doctest::Approx(1.25));
  CHECK(back[1].length_s == doctest::Approx(2.0));
  CHECK_THROWS_AS(parse_proposals("a 1 2 0.5\n"), Error);
  CHECK_THROWS_AS(parse_proposals("a 1 2 0.5 audio\n"), Error);

  ProposalHeads h = make_proposal_heads(tiny_cfg(3, {3, 5}), 4, 1);
  const AnchorSet anchors{{1.0, 2.0, 5.0}};
  Scratch s("heads");
  save_proposal_heads(s.dir, h, anchors);
  AnchorSet a2;
  const ProposalHeads h2 = load_proposal_heads(s.dir, &a2);
  CHECK(a2.priors == anchors.priors);
  const Matrix x = Matrix::Random(6, 4);
  CHECK(head_logits(h2, Modality::kSemantic, x).isApprox(head_logits(h, Modality::kSemantic, x), 1e-5));
}
