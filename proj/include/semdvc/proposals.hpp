#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "semdvc/autograd.hpp"
#include "semdvc/dataset.hpp"
#include "semdvc/transformer.hpp"

namespace semdvc {

// Prior event lengths in seconds, ascending.
struct AnchorSet {
  std::vector<double> priors;
  std::size_t size() const { return priors.size(); }
};

// 1-D Lloyd k-means over every ground-truth event length. Each restart
// starts from distinct random lengths (the first from evenly spaced
// quantiles); the lowest within-cluster sum of squares wins.
AnchorSet fit_anchors(const AnnotationSet& ann, std::size_t num_anchors, std::uint64_t seed = 0,
                      std::size_t restarts = 16);
AnchorSet fit_anchors(const std::vector<double>& lengths, std::size_t num_anchors, std::uint64_t seed = 0,
                      std::size_t restarts = 16);
double anchor_sse(const std::vector<double>& lengths, const std::vector<double>& centers);

enum class Modality { kVisual, kSemantic };
const char* to_string(Modality m);
Modality parse_modality(const std::string& s);

struct ProposalConfig {
  std::size_t num_anchors = 10;
  std::vector<std::size_t> kernel_sizes{5, 9, 13};  // one parallel head group each
  std::size_t hidden = 128;
  double negative_weight = 0.1;
  std::size_t num_proposals = 100;  // N per video
  std::size_t epochs = 50;
  std::size_t batch_size = 8;
  ag::AdamOptions adam;
  std::uint64_t seed = 0;

  void validate() const;
};

// Anchors are split into contiguous runs, one per kernel size; earlier
// groups take the remainder, so short priors meet the short kernels.
std::vector<std::size_t> anchor_groups(std::size_t num_anchors, std::size_t num_groups);

struct ProposalHeads {
  ProposalConfig cfg;
  std::size_t d_in = 0;
  ag::ParamStore params;  // "<modality>.g<group>.c<layer>.{w,b}"
};

ProposalHeads make_proposal_heads(const ProposalConfig& cfg, std::size_t d_in, std::uint64_t seed);

// L x 3A raw outputs; columns 3a, 3a+1, 3a+2 hold the offset, length and
// confidence logits of anchor a.
Matrix head_logits(const ProposalHeads& heads, Modality m, const Matrix& stream);

struct GridPrediction {
  Matrix center_s;    // L x A
  Matrix length_s;    // L x A
  Matrix confidence;  // L x A
  Matrix start_s;     // clamped to [0, duration]
  Matrix end_s;
};

// center = (t + 0.5 + tanh(o)/2) dt, length = prior exp(l), confidence = sigmoid(c).
GridPrediction decode_grid(const Matrix& logits, const AnchorSet& anchors, double clip_duration_s);
GridPrediction head_forward(const ProposalHeads& heads, Modality m, const Matrix& stream, const AnchorSet& anchors,
                            double clip_duration_s);

// Positive cell and anchor for one event: the cell holding its center and
// the prior whose centered interval has the highest IoU with it.
struct AnchorMatch {
  std::size_t cell = 0;
  std::size_t anchor = 0;
  double offset = 0.0;      // target for tanh(o)/2
  double log_length = 0.0;  // target for l
};
AnchorMatch match_event(const Event& e, const AnchorSet& anchors, double clip_duration_s, std::size_t cells);

// Loss over one grid of logits and its gradient w.r.t. those logits:
// squared errors on (offset, log-length) plus cross-entropy on the
// confidence for matched cells, negative-class cross-entropy scaled by
// `negative_weight` elsewhere, all divided by the number of positives.
double grid_loss(const Matrix& logits, const std::vector<Event>& events, const AnchorSet& anchors,
                 double clip_duration_s, double negative_weight, Matrix* dlogits = nullptr);

// Summed grid loss of both modality heads; optional parameter gradients.
double proposal_loss(const ProposalHeads& heads, const BimodalMemory& memory, const std::vector<Event>& events,
                     const AnchorSet& anchors, double clip_duration_s, ag::ParamMap* grads = nullptr);

struct ProposalExample {
  std::string video_id;
  ClipInputs inputs;
  std::vector<Event> events;
  double clip_duration_s = kDefaultClipDuration;
};

struct ProposalTrainReport {
  double initial_loss = 0.0;
  std::vector<double> epoch_loss;
};

// The encoder is evaluated once per video and never updated.
ProposalHeads train_proposal_module(const CaptionModel& encoder, const std::vector<ProposalExample>& data,
                                    const AnchorSet& anchors, const ProposalConfig& cfg,
                                    ProposalTrainReport* report = nullptr);

struct Proposal {
  std::string video_id;
  double center_s = 0.0;
  double length_s = 0.0;
  double confidence = 0.0;
  Modality modality = Modality::kVisual;

  double start_s() const { return center_s - 0.5 * length_s; }
  double end_s() const { return center_s + 0.5 * length_s; }
};

struct ProposalList {
  std::vector<Proposal> proposals;
  bool shortfall = false;  // fewer grid predictions than requested
};

// Visual takes its ceil(N/2) most confident predictions and semantic its
// floor(N/2); merged by confidence, then earlier center, visual first.
ProposalList select_proposals(const std::string& video_id, const GridPrediction& visual,
                              const GridPrediction& semantic, std::size_t n);
ProposalList generate_proposals(const ProposalHeads& heads, const BimodalMemory& memory, const AnchorSet& anchors,
                                double clip_duration_s, const std::string& video_id, std::size_t n);

// "video_id start_s end_s confidence modality" per line.
std::string format_proposals(const std::vector<Proposal>& proposals);
std::vector<Proposal> parse_proposals(const std::string& text);

void save_proposal_heads(const std::filesystem::path& dir, const ProposalHeads& heads, const AnchorSet& anchors);
ProposalHeads load_proposal_heads(const std::filesystem::path& dir, AnchorSet* anchors);

}  // namespace semdvc
