#pragma once

#include <map>
#include <string>
#include <vector>

#include "semdvc/dataset.hpp"

namespace semdvc {

struct Segment {
  double start_s = 0.0;
  double end_s = 0.0;
};

// Intersection over union of two temporal segments, in [0, 1].
double tiou(const Segment& a, const Segment& b);

struct ScoredSegment {
  Segment segment;
  double confidence = 0.0;
};

using ProposalsByVideo = std::map<std::string, std::vector<ScoredSegment>>;

enum class MatchRule {
  // In confidence order each proposal takes the unmatched ground-truth event
  // with the highest tIoU at or above the threshold; TP counts matches.
  kGreedyOneToOne,
  // ActivityNet proposal scoring: a proposal is correct if it reaches the
  // threshold against any event, an event is recalled if any proposal does.
  kAnyOverlap,
};

struct PrfScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct PrfReport {
  PrfScores mean;                     // averaged over thresholds
  std::vector<PrfScores> per_threshold;
};

// Precision and recall are averaged over the videos of `gt` (a video without
// proposals scores zero), F1 is their harmonic mean at each threshold, and
// all three are then averaged over thresholds.
PrfReport proposal_prf(const ProposalsByVideo& proposals, const AnnotationSet& gt,
                       const std::vector<double>& thresholds,
                       MatchRule rule = MatchRule::kGreedyOneToOne);

using TokenSeq = std::vector<std::string>;

// Corpus BLEU@1..max_n: clipped n-gram precisions, geometric mean over
// orders 1..n, brevity penalty from total lengths. No smoothing.
std::vector<double> bleu(const std::vector<TokenSeq>& candidates, const std::vector<TokenSeq>& references,
                         std::size_t max_n = 4);

struct NgramStats {
  std::vector<double> matched;  // clipped matches per order
  std::vector<double> total;    // candidate n-grams per order
  double candidate_length = 0.0;
  double reference_length = 0.0;
};
NgramStats bleu_stats(const std::vector<TokenSeq>& candidates, const std::vector<TokenSeq>& references,
                      std::size_t max_n);

// Plain-text table and "key value" lines for a flat report.
std::string format_report_table(const std::vector<std::pair<std::string, double>>& rows);
std::string format_report_kv(const std::vector<std::pair<std::string, double>>& rows);

}  // namespace semdvc
