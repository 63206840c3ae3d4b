#include "semdvc/proposals.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include <fmt/format.h>
#include <json.hpp>

#include "semdvc/error.hpp"

namespace semdvc {

using Index = Eigen::Index;

// --- anchors -------------------------------------------------------------

double anchor_sse(const std::vector<double>& lengths, const std::vector<double>& centers) {
  double total = 0.0;
  for (double x : lengths) {
    double best = std::numeric_limits<double>::infinity();
    for (double c : centers) best = std::min(best, (x - c) * (x - c));
    total += best;
  }
  return total;
}

namespace {

std::vector<double> lloyd_1d(const std::vector<double>& xs, std::vector<double> centers) {
  std::vector<std::size_t> label(xs.size(), 0);
  for (std::size_t iter = 0; iter < 1000; ++iter) {
    bool changed = iter == 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < centers.size(); ++c) {
        if (std::abs(xs[i] - centers[c]) < std::abs(xs[i] - centers[best])) best = c;
      }
      if (best != label[i]) changed = true;
      label[i] = best;
    }
    std::vector<double> sum(centers.size(), 0.0);
    std::vector<std::size_t> count(centers.size(), 0);
    for (std::size_t i = 0; i < xs.size(); ++i) {
      sum[label[i]] += xs[i];
      ++count[label[i]];
    }
    for (std::size_t c = 0; c < centers.size(); ++c) {
      if (count[c] > 0) centers[c] = sum[c] / static_cast<double>(count[c]);
    }
    if (!changed) break;
  }
  return centers;
}

}  // namespace

AnchorSet fit_anchors(const std::vector<double>& lengths, std::size_t num_anchors, std::uint64_t seed,
                      std::size_t restarts) {
  if (num_anchors < 1) throw Error(ErrorKind::kInvalidArgument, "need at least one anchor");
  if (lengths.size() < num_anchors) {
    throw Error(ErrorKind::kInvalidArgument, fmt::format("fit_anchors: {} events for {} anchors", lengths.size(),
                                                         num_anchors));
  }
  for (double x : lengths) {
    if (!(x > 0.0) || !std::isfinite(x)) throw Error(ErrorKind::kValidation, "event lengths must be positive");
  }
  std::vector<double> sorted = lengths;
  std::sort(sorted.begin(), sorted.end());

  std::vector<double> init(num_anchors);
  for (std::size_t c = 0; c < num_anchors; ++c) {
    const double q = (static_cast<double>(c) + 0.5) / static_cast<double>(num_anchors);
    init[c] = sorted[std::min(sorted.size() - 1, static_cast<std::size_t>(q * static_cast<double>(sorted.size())))];
  }
  std::vector<double> best = lloyd_1d(sorted, init);
  double best_sse = anchor_sse(sorted, best);

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> idx(sorted.size());
  for (std::size_t r = 1; r < std::max<std::size_t>(restarts, 1); ++r) {
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t c = 0; c < num_anchors; ++c) init[c] = sorted[idx[c]];
    std::vector<double> centers = lloyd_1d(sorted, init);
    const double sse = anchor_sse(sorted, centers);
    if (sse < best_sse - 1e-12) {
      best_sse = sse;
      best = std::move(centers);
    }
  }
  std::sort(best.begin(), best.end());
  return AnchorSet{best};
}

AnchorSet fit_anchors(const AnnotationSet& ann, std::size_t num_anchors, std::uint64_t seed, std::size_t restarts) {
  std::vector<double> lengths;
  for (const auto& [id, video] : ann) {
    for (const auto& e : video.events) lengths.push_back(e.length());
  }
  return fit_anchors(lengths, num_anchors, seed, restarts);
}

// --- configuration -------------------------------------------------------

const char* to_string(Modality m) { return m == Modality::kVisual ? "visual" : "semantic"; }

Modality parse_modality(const std::string& s) {
  if (s == "visual") return Modality::kVisual;
  if (s == "semantic") return Modality::kSemantic;
  throw Error(ErrorKind::kMalformed, "unknown modality '" + s + "'");
}

void ProposalConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorKind::kValidation, "proposal config: " + what); };
  if (num_anchors < 1) fail("num_anchors must be >= 1");
  if (kernel_sizes.empty()) fail("need at least one kernel size");
  if (kernel_sizes.size() > num_anchors) fail("more kernel groups than anchors");
  for (std::size_t k : kernel_sizes) {
    if (k < 1 || k % 2 == 0) fail("kernel sizes must be odd");
  }
  if (hidden < 1) fail("hidden must be >= 1");
  if (!(negative_weight >= 0.0)) fail("negative_weight must be >= 0");
  if (num_proposals < 1) fail("num_proposals must be >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
}

std::vector<std::size_t> anchor_groups(std::size_t num_anchors, std::size_t num_groups) {
  std::vector<std::size_t> sizes(num_groups, num_anchors / num_groups);
  for (std::size_t g = 0; g < num_anchors % num_groups; ++g) ++sizes[g];
  return sizes;
}

// --- heads ---------------------------------------------------------------

namespace {

std::string pname(Modality m, std::size_t g, int layer, const char* what) {
  return fmt::format("{}.g{}.c{}.{}", to_string(m), g, layer, what);
}

ag::Var head_graph(ag::Binder& b, const ProposalHeads& heads, Modality m, ag::Var stream) {
  const auto sizes = anchor_groups(heads.cfg.num_anchors, heads.cfg.kernel_sizes.size());
  std::vector<ag::Var> outs;
  for (std::size_t g = 0; g < sizes.size(); ++g) {
    ag::Var x = ag::im2col(stream, static_cast<Index>(heads.cfg.kernel_sizes[g]));
    ag::Var h = ag::relu(ag::add_row(ag::matmul(x, b(pname(m, g, 1, "w"))), b(pname(m, g, 1, "b"))));
    h = ag::relu(ag::add_row(ag::matmul(h, b(pname(m, g, 2, "w"))), b(pname(m, g, 2, "b"))));
    outs.push_back(ag::add_row(ag::matmul(h, b(pname(m, g, 3, "w"))), b(pname(m, g, 3, "b"))));
  }
  return outs.size() == 1 ? outs.front() : ag::concat_cols(outs);
}

void check_stream(const ProposalHeads& heads, const Matrix& stream) {
  if (stream.rows() < 1) throw Error(ErrorKind::kInvalidArgument, "proposal head: empty stream");
  if (static_cast<std::size_t>(stream.cols()) != heads.d_in) {
    throw Error(ErrorKind::kDimensionMismatch,
                fmt::format("proposal head: stream width {} but heads expect {}", stream.cols(), heads.d_in));
  }
}

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

ProposalHeads make_proposal_heads(const ProposalConfig& cfg, std::size_t d_in, std::uint64_t seed) {
  cfg.validate();
  if (d_in < 1) throw Error(ErrorKind::kInvalidArgument, "proposal heads need d_in >= 1");
  ProposalHeads heads;
  heads.cfg = cfg;
  heads.d_in = d_in;
  std::mt19937_64 rng(seed);
  const auto sizes = anchor_groups(cfg.num_anchors, cfg.kernel_sizes.size());
  const auto h = static_cast<Index>(cfg.hidden);
  for (Modality m : {Modality::kVisual, Modality::kSemantic}) {
    for (std::size_t g = 0; g < sizes.size(); ++g) {
      const auto in = static_cast<Index>(cfg.kernel_sizes[g] * d_in);
      const auto out = static_cast<Index>(3 * sizes[g]);
      heads.params.set(pname(m, g, 1, "w"), ag::xavier(in, h, rng));
      heads.params.set(pname(m, g, 1, "b"), Matrix::Zero(1, h));
      heads.params.set(pname(m, g, 2, "w"), ag::xavier(h, h, rng));
      heads.params.set(pname(m, g, 2, "b"), Matrix::Zero(1, h));
      heads.params.set(pname(m, g, 3, "w"), ag::xavier(h, out, rng));
      heads.params.set(pname(m, g, 3, "b"), Matrix::Zero(1, out));
    }
  }
  return heads;
}

Matrix head_logits(const ProposalHeads& heads, Modality m, const Matrix& stream) {
  check_stream(heads, stream);
  ag::Tape t(false);
  ag::Binder b(t, heads.params, false);
  return head_graph(b, heads, m, t.constant(stream)).value();
}

GridPrediction decode_grid(const Matrix& logits, const AnchorSet& anchors, double clip_duration_s) {
  const auto a_count = static_cast<Index>(anchors.size());
  if (logits.rows() < 1) throw Error(ErrorKind::kInvalidArgument, "proposal grid: empty stream");
  if (logits.cols() != 3 * a_count) throw Error(ErrorKind::kDimensionMismatch, "proposal grid: 3 logits per anchor");
  if (!(clip_duration_s > 0.0)) throw Error(ErrorKind::kInvalidArgument, "clip duration must be positive");
  const Index cells = logits.rows();
  const double duration = static_cast<double>(cells) * clip_duration_s;
  GridPrediction g;
  g.center_s.resize(cells, a_count);
  g.length_s.resize(cells, a_count);
  g.confidence.resize(cells, a_count);
  g.start_s.resize(cells, a_count);
  g.end_s.resize(cells, a_count);
  for (Index t = 0; t < cells; ++t) {
    for (Index a = 0; a < a_count; ++a) {
      const double c = (static_cast<double>(t) + 0.5 + 0.5 * std::tanh(logits(t, 3 * a))) * clip_duration_s;
      const double len = anchors.priors[static_cast<std::size_t>(a)] * std::exp(logits(t, 3 * a + 1));
      g.center_s(t, a) = c;
      g.length_s(t, a) = len;
      g.confidence(t, a) = sigmoid(logits(t, 3 * a + 2));
      g.start_s(t, a) = std::clamp(c - 0.5 * len, 0.0, duration);
      g.end_s(t, a) = std::clamp(c + 0.5 * len, 0.0, duration);
    }
  }
  return g;
}

GridPrediction head_forward(const ProposalHeads& heads, Modality m, const Matrix& stream, const AnchorSet& anchors,
                            double clip_duration_s) {
  if (anchors.size() != heads.cfg.num_anchors) {
    throw Error(ErrorKind::kDimensionMismatch, "anchor count differs from the heads' configuration");
  }
  return decode_grid(head_logits(heads, m, stream), anchors, clip_duration_s);
}

// --- loss ----------------------------------------------------------------

AnchorMatch match_event(const Event& e, const AnchorSet& anchors, double clip_duration_s, std::size_t cells) {
  if (anchors.size() == 0) throw Error(ErrorKind::kInvalidArgument, "no anchors");
  if (!(e.length() > 0.0)) throw Error(ErrorKind::kValidation, "event must have positive length");
  AnchorMatch m;
  const double pos = e.center() / clip_duration_s;
  m.cell = std::min(cells - 1, static_cast<std::size_t>(std::max(0.0, std::floor(pos + 1e-9))));
  // Centers on a cell border sit at the edge of tanh's range; aim just inside.
  m.offset = std::clamp(pos - static_cast<double>(m.cell) - 0.5, -0.475, 0.475);
  double best = -1.0;
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    const double p = anchors.priors[a];
    const double iou = std::min(p, e.length()) / std::max(p, e.length());
    if (iou > best) {
      best = iou;
      m.anchor = a;
    }
  }
  m.log_length = std::log(e.length() / anchors.priors[m.anchor]);
  return m;
}

double grid_loss(const Matrix& logits, const std::vector<Event>& events, const AnchorSet& anchors,
                 double clip_duration_s, double negative_weight, Matrix* dlogits) {
  const auto a_count = static_cast<Index>(anchors.size());
  if (logits.cols() != 3 * a_count) throw Error(ErrorKind::kDimensionMismatch, "proposal grid: 3 logits per anchor");
  const Index cells = logits.rows();
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> positive =
      Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>::Constant(cells, a_count, false);
  std::vector<AnchorMatch> matches;
  for (const auto& e : events) {
    const AnchorMatch m = match_event(e, anchors, clip_duration_s, static_cast<std::size_t>(cells));
    const auto t = static_cast<Index>(m.cell);
    const auto a = static_cast<Index>(m.anchor);
    if (positive(t, a)) continue;  // first event to claim a slot keeps it
    positive(t, a) = true;
    matches.push_back(m);
  }
  const double norm = static_cast<double>(std::max<std::size_t>(1, matches.size()));
  if (dlogits) *dlogits = Matrix::Zero(cells, 3 * a_count);

  double total = 0.0;
  for (const auto& m : matches) {
    const auto t = static_cast<Index>(m.cell);
    const auto a = static_cast<Index>(m.anchor);
    const double th = std::tanh(logits(t, 3 * a));
    const double r_off = 0.5 * th - m.offset;
    const double r_len = logits(t, 3 * a + 1) - m.log_length;
    const double c = logits(t, 3 * a + 2);
    total += r_off * r_off + r_len * r_len + softplus(-c);
    if (dlogits) {
      (*dlogits)(t, 3 * a) = r_off * (1.0 - th * th) / norm;
      (*dlogits)(t, 3 * a + 1) = 2.0 * r_len / norm;
      (*dlogits)(t, 3 * a + 2) = (sigmoid(c) - 1.0) / norm;
    }
  }
  for (Index t = 0; t < cells; ++t) {
    for (Index a = 0; a < a_count; ++a) {
      if (positive(t, a)) continue;
      const double c = logits(t, 3 * a + 2);
      total += negative_weight * softplus(c);
      if (dlogits) (*dlogits)(t, 3 * a + 2) = negative_weight * sigmoid(c) / norm;
    }
  }
  return total / norm;
}

namespace {

double memory_loss(const ProposalHeads& heads, const BimodalMemory& memory, const std::vector<Event>& events,
                   const AnchorSet& anchors, double dt, ag::ParamMap* grads) {
  if (anchors.size() != heads.cfg.num_anchors) {
    throw Error(ErrorKind::kDimensionMismatch, "anchor count differs from the heads' configuration");
  }
  check_stream(heads, memory.visual);
  check_stream(heads, memory.semantic);
  ag::Tape t(grads != nullptr);
  ag::Binder b(t, heads.params, grads != nullptr);
  std::vector<ag::Var> terms;
  for (Modality m : {Modality::kVisual, Modality::kSemantic}) {
    const Matrix& stream = m == Modality::kVisual ? memory.visual : memory.semantic;
    ag::Var logits = head_graph(b, heads, m, t.constant(stream));
    Matrix d;
    const double value = grid_loss(logits.value(), events, anchors, dt, heads.cfg.negative_weight, &d);
    terms.push_back(ag::external_scalar(logits, value, std::move(d)));
  }
  ag::Var loss = ag::sum(terms);
  if (grads) {
    t.backward(loss);
    *grads = b.gradients();
  }
  return loss.value()(0, 0);
}

}  // namespace

double proposal_loss(const ProposalHeads& heads, const BimodalMemory& memory, const std::vector<Event>& events,
                     const AnchorSet& anchors, double clip_duration_s, ag::ParamMap* grads) {
  return memory_loss(heads, memory, events, anchors, clip_duration_s, grads);
}

ProposalHeads train_proposal_module(const CaptionModel& encoder, const std::vector<ProposalExample>& data,
                                    const AnchorSet& anchors, const ProposalConfig& cfg,
                                    ProposalTrainReport* report) {
  cfg.validate();
  if (encoder.kind != ModelKind::kBimodal) throw Error(ErrorKind::kInvalidArgument, "proposals need a bi-modal encoder");
  if (anchors.size() != cfg.num_anchors) throw Error(ErrorKind::kDimensionMismatch, "anchor count mismatch");
  std::size_t event_count = 0;
  for (const auto& ex : data) event_count += ex.events.size();
  if (data.empty() || event_count == 0) throw Error(ErrorKind::kInvalidArgument, "train_proposal_module: no GT events");

  std::vector<BimodalMemory> memories;
  memories.reserve(data.size());
  for (const auto& ex : data) memories.push_back(bimodal_encode(encoder, ex.inputs.visual, ex.inputs.semantic));

  ProposalHeads heads = make_proposal_heads(cfg, encoder.cfg.d_model, cfg.seed);
  auto mean_loss = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      s += memory_loss(heads, memories[i], data[i].events, anchors, data[i].clip_duration_s, nullptr);
    }
    return s / static_cast<double>(data.size());
  };
  if (report) report->initial_loss = mean_loss();

  ag::Adam adam(cfg.adam);
  std::mt19937_64 rng(cfg.seed ^ 0x5851F42D4C957F2DULL);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      ag::ParamMap grads;
      for (std::size_t i = begin; i < end; ++i) {
        ag::ParamMap g;
        const std::size_t v = order[i];
        epoch_loss += memory_loss(heads, memories[v], data[v].events, anchors, data[v].clip_duration_s, &g);
        ag::accumulate(grads, g, 1.0 / static_cast<double>(end - begin));
      }
      adam.step(heads.params, grads);
    }
    if (report) report->epoch_loss.push_back(epoch_loss / static_cast<double>(data.size()));
  }
  return heads;
}

// --- selection -----------------------------------------------------------

namespace {

std::vector<Proposal> top_k(const std::string& video_id, const GridPrediction& g, Modality m, std::size_t k) {
  std::vector<Proposal> all;
  all.reserve(static_cast<std::size_t>(g.confidence.size()));
  for (Index t = 0; t < g.confidence.rows(); ++t) {
    for (Index a = 0; a < g.confidence.cols(); ++a) {
      Proposal p;
      p.video_id = video_id;
      p.center_s = 0.5 * (g.start_s(t, a) + g.end_s(t, a));
      p.length_s = g.end_s(t, a) - g.start_s(t, a);
      p.confidence = g.confidence(t, a);
      p.modality = m;
      all.push_back(p);
    }
  }
  std::stable_sort(all.begin(), all.end(), [](const Proposal& a, const Proposal& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    return a.center_s < b.center_s;
  });
  if (all.size() > k) all.resize(k);
  return all;
}

}  // namespace

ProposalList select_proposals(const std::string& video_id, const GridPrediction& visual,
                              const GridPrediction& semantic, std::size_t n) {
  ProposalList out;
  const std::size_t want_v = (n + 1) / 2;
  const std::size_t want_s = n / 2;
  auto v = top_k(video_id, visual, Modality::kVisual, want_v);
  auto s = top_k(video_id, semantic, Modality::kSemantic, want_s);
  out.shortfall = v.size() < want_v || s.size() < want_s;
  out.proposals = std::move(v);
  out.proposals.insert(out.proposals.end(), s.begin(), s.end());
  std::stable_sort(out.proposals.begin(), out.proposals.end(), [](const Proposal& a, const Proposal& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    if (a.center_s != b.center_s) return a.center_s < b.center_s;
    return a.modality == Modality::kVisual && b.modality == Modality::kSemantic;
  });
  return out;
}

ProposalList generate_proposals(const ProposalHeads& heads, const BimodalMemory& memory, const AnchorSet& anchors,
                                double clip_duration_s, const std::string& video_id, std::size_t n) {
  return select_proposals(video_id, head_forward(heads, Modality::kVisual, memory.visual, anchors, clip_duration_s),
                          head_forward(heads, Modality::kSemantic, memory.semantic, anchors, clip_duration_s), n);
}

// --- text and disk formats -------------------------------------------------

std::string format_proposals(const std::vector<Proposal>& proposals) {
  std::string out;
  for (const auto& p : proposals) {
    out += fmt::format("{} {} {} {} {}\n", p.video_id, p.start_s(), p.end_s(), p.confidence, to_string(p.modality));
  }
  return out;
}

std::vector<Proposal> parse_proposals(const std::string& text) {
  std::vector<Proposal> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream fields(line);
    Proposal p;
    double start = 0.0;
    double end = 0.0;
    std::string modality;
    std::string extra;
    if (!(fields >> p.video_id >> start >> end >> p.confidence >> modality) || (fields >> extra)) {
      throw Error(ErrorKind::kMalformed, fmt::format("proposals line {}: expected 5 fields", lineno));
    }
    p.modality = parse_modality(modality);
    p.center_s = 0.5 * (start + end);
    p.length_s = end - start;
    out.push_back(p);
  }
  return out;
}

void save_proposal_heads(const std::filesystem::path& dir, const ProposalHeads& heads, const AnchorSet& anchors) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json meta;
  meta["d_in"] = heads.d_in;
  meta["num_anchors"] = heads.cfg.num_anchors;
  meta["kernel_sizes"] = heads.cfg.kernel_sizes;
  meta["hidden"] = heads.cfg.hidden;
  meta["negative_weight"] = heads.cfg.negative_weight;
  meta["seed"] = heads.cfg.seed;
  meta["anchors"] = anchors.priors;
  std::vector<std::string> names;
  for (const auto& [name, value] : heads.params.values()) {
    save_matrix(dir / (name + ".dvcf"), value);
    names.push_back(name);
  }
  meta["params"] = names;
  std::ofstream out(dir / "heads.json", std::ios::trunc);
  out << meta.dump(1) << "\n";
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + (dir / "heads.json").string());
}

ProposalHeads load_proposal_heads(const std::filesystem::path& dir, AnchorSet* anchors) {
  std::ifstream in(dir / "heads.json");
  if (!in) throw Error(ErrorKind::kMissingFile, "cannot open " + (dir / "heads.json").string());
  try {
    nlohmann::json meta;
    in >> meta;
    ProposalHeads heads;
    heads.d_in = meta.at("d_in").get<std::size_t>();
    heads.cfg.num_anchors = meta.at("num_anchors").get<std::size_t>();
    heads.cfg.kernel_sizes = meta.at("kernel_sizes").get<std::vector<std::size_t>>();
    heads.cfg.hidden = meta.at("hidden").get<std::size_t>();
    heads.cfg.negative_weight = meta.at("negative_weight").get<double>();
    heads.cfg.seed = meta.at("seed").get<std::uint64_t>();
    heads.cfg.validate();
    if (anchors) anchors->priors = meta.at("anchors").get<std::vector<double>>();
    for (const auto& name : meta.at("params")) {
      const auto n = name.get<std::string>();
      heads.params.set(n, load_matrix(dir / (n + ".dvcf")));
    }
    return heads;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kMalformed, (dir / "heads.json").string() + ": " + e.what());
  }
}

}  // namespace semdvc
