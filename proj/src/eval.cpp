#include "semdvc/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "semdvc/error.hpp"

namespace semdvc {

double tiou(const Segment& a, const Segment& b) {
  const double inter = std::max(0.0, std::min(a.end_s, b.end_s) - std::max(a.start_s, b.start_s));
  const double uni = std::max(a.end_s, b.end_s) - std::min(a.start_s, b.start_s);
  if (uni <= 0.0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

namespace {

PrfScores score_video(const std::vector<ScoredSegment>& props, const std::vector<Event>& events,
                      double threshold, MatchRule rule) {
  PrfScores s;
  if (events.empty()) return s;
  if (props.empty()) return s;

  std::vector<std::size_t> order(props.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return props[a].confidence > props[b].confidence; });

  double tp_props = 0.0;
  double tp_events = 0.0;
  if (rule == MatchRule::kGreedyOneToOne) {
    std::vector<bool> used(events.size(), false);
    for (std::size_t pi : order) {
      std::size_t best = events.size();
      double best_iou = -1.0;
      for (std::size_t e = 0; e < events.size(); ++e) {
        if (used[e]) continue;
        const double iou = tiou(props[pi].segment, {events[e].start_s, events[e].end_s});
        if (iou >= threshold && iou > best_iou) {
          best_iou = iou;
          best = e;
        }
      }
      if (best < events.size()) {
        used[best] = true;
        tp_props += 1.0;
      }
    }
    tp_events = tp_props;
  } else {
    std::vector<bool> recalled(events.size(), false);
    for (const auto& p : props) {
      bool hit = false;
      for (std::size_t e = 0; e < events.size(); ++e) {
        if (tiou(p.segment, {events[e].start_s, events[e].end_s}) >= threshold) {
          hit = true;
          recalled[e] = true;
        }
      }
      if (hit) tp_props += 1.0;
    }
    tp_events = static_cast<double>(std::count(recalled.begin(), recalled.end(), true));
  }
  s.precision = tp_props / static_cast<double>(props.size());
  s.recall = tp_events / static_cast<double>(events.size());
  return s;
}

double harmonic(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

}  // namespace

PrfReport proposal_prf(const ProposalsByVideo& proposals, const AnnotationSet& gt,
                       const std::vector<double>& thresholds, MatchRule rule) {
  if (gt.empty()) throw Error(ErrorKind::kInvalidArgument, "proposal_prf: empty ground-truth set");
  if (thresholds.empty()) throw Error(ErrorKind::kInvalidArgument, "proposal_prf: no tIoU thresholds");
  for (double t : thresholds) {
    if (!(t > 0.0 && t <= 1.0)) throw Error(ErrorKind::kInvalidArgument, "tIoU thresholds must lie in (0, 1]");
  }
  static const std::vector<ScoredSegment> kNone;
  PrfReport report;
  for (double t : thresholds) {
    PrfScores acc;
    for (const auto& [id, video] : gt) {
      auto it = proposals.find(id);
      const PrfScores v = score_video(it == proposals.end() ? kNone : it->second, video.events, t, rule);
      acc.precision += v.precision;
      acc.recall += v.recall;
    }
    acc.precision /= static_cast<double>(gt.size());
    acc.recall /= static_cast<double>(gt.size());
    acc.f1 = harmonic(acc.precision, acc.recall);
    report.per_threshold.push_back(acc);
    report.mean.precision += acc.precision;
    report.mean.recall += acc.recall;
    report.mean.f1 += acc.f1;
  }
  const double n = static_cast<double>(thresholds.size());
  report.mean.precision /= n;
  report.mean.recall /= n;
  report.mean.f1 /= n;
  return report;
}

NgramStats bleu_stats(const std::vector<TokenSeq>& candidates, const std::vector<TokenSeq>& references,
                      std::size_t max_n) {
  if (candidates.size() != references.size()) {
    throw Error(ErrorKind::kDimensionMismatch, "bleu: candidate and reference lists differ in length");
  }
  if (candidates.empty()) throw Error(ErrorKind::kInvalidArgument, "bleu: empty corpus");
  if (max_n < 1) throw Error(ErrorKind::kInvalidArgument, "bleu: max_n must be >= 1");
  NgramStats st;
  st.matched.assign(max_n, 0.0);
  st.total.assign(max_n, 0.0);
  for (std::size_t s = 0; s < candidates.size(); ++s) {
    const TokenSeq& cand = candidates[s];
    const TokenSeq& ref = references[s];
    st.candidate_length += static_cast<double>(cand.size());
    st.reference_length += static_cast<double>(ref.size());
    for (std::size_t n = 1; n <= max_n; ++n) {
      std::map<TokenSeq, int> ref_counts;
      for (std::size_t i = 0; i + n <= ref.size(); ++i) ++ref_counts[TokenSeq(ref.begin() + i, ref.begin() + i + n)];
      std::map<TokenSeq, int> cand_counts;
      for (std::size_t i = 0; i + n <= cand.size(); ++i) ++cand_counts[TokenSeq(cand.begin() + i, cand.begin() + i + n)];
      for (const auto& [gram, c] : cand_counts) {
        auto it = ref_counts.find(gram);
        st.matched[n - 1] += std::min(c, it == ref_counts.end() ? 0 : it->second);
        st.total[n - 1] += c;
      }
    }
  }
  return st;
}

std::vector<double> bleu(const std::vector<TokenSeq>& candidates, const std::vector<TokenSeq>& references,
                         std::size_t max_n) {
  const NgramStats st = bleu_stats(candidates, references, max_n);
  double bp = 0.0;
  if (st.candidate_length > 0.0) {
    bp = st.candidate_length > st.reference_length ? 1.0 : std::exp(1.0 - st.reference_length / st.candidate_length);
  }
  std::vector<double> scores(max_n, 0.0);
  double log_sum = 0.0;
  bool zero = false;
  for (std::size_t n = 0; n < max_n; ++n) {
    if (st.total[n] == 0.0 || st.matched[n] == 0.0) zero = true;
    if (!zero) log_sum += std::log(st.matched[n] / st.total[n]);
    scores[n] = zero ? 0.0 : bp * std::exp(log_sum / static_cast<double>(n + 1));
  }
  return scores;
}

std::string format_report_table(const std::vector<std::pair<std::string, double>>& rows) {
  std::size_t width = 6;
  for (const auto& [k, _] : rows) width = std::max(width, k.size());
  std::string out = fmt::format("{:<{}}  {:>10}\n", "metric", width, "value");
  out += std::string(width + 12, '-') + "\n";
  for (const auto& [k, v] : rows) out += fmt::format("{:<{}}  {:>10.4f}\n", k, width, v);
  return out;
}

std::string format_report_kv(const std::vector<std::pair<std::string, double>>& rows) {
  std::string out;
  for (const auto& [k, v] : rows) out += fmt::format("{} {}\n", k, v);
  return out;
}

}  // namespace semdvc
