#include "semdvc/pipeline.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <json.hpp>
#include <openssl/evp.h>

#include "semdvc/cooccur.hpp"
#include "semdvc/error.hpp"
#include "semdvc/eval.hpp"

namespace semdvc {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

// --- config ----------------------------------------------------------------

void PipelineConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorKind::kValidation, "pipeline config: " + what); };
  if (out_dir.empty()) fail("out_dir must be set");
  if (!features_dir.empty() && annotations.empty()) fail("features_dir needs an annotations file");
  if (!(clip_duration_s > 0.0)) fail("clip_duration_s must be positive");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) fail("val_fraction must be in [0, 1)");
  if (features_dir.empty()) synth.validate();
  if (codebook.k < 1 || codebook.epochs < 1 || codebook.batch_size < 1) fail("codebook sizes must be >= 1");
  if (window < 1) fail("window must be >= 1");
  embed.validate();
  transformer.validate();
  if (captioner.epochs < 1 || captioner.batch_size < 1 || captioner.decode_max_len < 1) {
    fail("captioner epochs, batch_size and decode_max_len must be >= 1");
  }
  if (!(captioner.lr > 0.0)) fail("captioner lr must be positive");
  proposals.validate();
  if (!(proposals.adam.lr > 0.0)) fail("proposal lr must be positive");
  if (caption_top < 1) fail("caption_top must be >= 1");
  if (thresholds.empty()) fail("need at least one tIoU threshold");
  for (double t : thresholds) {
    if (!(t > 0.0 && t <= 1.0)) fail("tIoU thresholds must lie in (0, 1]");
  }
  if (max_n < 1) fail("max_n must be >= 1");
}

namespace {

template <typename T>
void take(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw Error(ErrorKind::kValidation, "config section '" + where + "' must be an object");
  std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [k, _] : j.items()) {
    if (!allowed.count(k)) throw Error(ErrorKind::kValidation, fmt::format("unknown config key '{}{}'", where, k));
  }
}

fs::path resolve(const fs::path& p, const fs::path& base) {
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return base / p;
}

}  // namespace

PipelineConfig parse_pipeline_config(const std::string& json_text, const fs::path& base) {
  PipelineConfig c;
  try {
    const json j = json::parse(json_text);
    reject_unknown(j,
                   {"paths", "seed", "clip_duration_s", "val_fraction", "synth", "codebook", "cooccur", "embed",
                    "transformer", "captioner", "proposals", "caption", "eval"},
                   "");
    if (j.contains("paths")) {
      const json& p = j["paths"];
      reject_unknown(p, {"features_dir", "annotations", "out", "data"}, "paths.");
      if (p.contains("features_dir")) c.features_dir = resolve(p["features_dir"].get<std::string>(), base);
      if (p.contains("annotations")) c.annotations = resolve(p["annotations"].get<std::string>(), base);
      if (p.contains("out")) c.out_dir = resolve(p["out"].get<std::string>(), base);
      if (p.contains("data")) c.data_dir = resolve(p["data"].get<std::string>(), base);
    }
    take(j, "seed", c.seed);
    take(j, "clip_duration_s", c.clip_duration_s);
    take(j, "val_fraction", c.val_fraction);
    if (j.contains("synth")) {
      const json& s = j["synth"];
      reject_unknown(s,
                     {"num_videos", "clips_per_video", "num_topics", "clusters_per_topic", "feature_dim",
                      "noise_sigma", "events_per_video", "vocab", "dominant_prob"},
                     "synth.");
      take(s, "num_videos", c.synth.num_videos);
      take(s, "clips_per_video", c.synth.clips_per_video_range);
      take(s, "num_topics", c.synth.num_topics);
      take(s, "clusters_per_topic", c.synth.clusters_per_topic);
      take(s, "feature_dim", c.synth.feature_dim);
      take(s, "noise_sigma", c.synth.noise_sigma);
      take(s, "events_per_video", c.synth.events_per_video_range);
      take(s, "vocab", c.synth.vocab);
      take(s, "dominant_prob", c.synth.dominant_prob);
    }
    if (j.contains("codebook")) {
      const json& s = j["codebook"];
      reject_unknown(s, {"k", "epochs", "batch_size"}, "codebook.");
      take(s, "k", c.codebook.k);
      take(s, "epochs", c.codebook.epochs);
      take(s, "batch_size", c.codebook.batch_size);
    }
    if (j.contains("cooccur")) {
      reject_unknown(j["cooccur"], {"window"}, "cooccur.");
      take(j["cooccur"], "window", c.window);
    }
    if (j.contains("embed")) {
      const json& s = j["embed"];
      reject_unknown(s, {"t_max", "alpha", "lr", "max_iters", "patience", "d_emb"}, "embed.");
      take(s, "t_max", c.embed.t_max);
      take(s, "alpha", c.embed.alpha);
      take(s, "lr", c.embed.lr);
      take(s, "max_iters", c.embed.max_iters);
      take(s, "patience", c.embed.early_stop_patience);
      take(s, "d_emb", c.embed.d_emb);
    }
    if (j.contains("transformer")) {
      const json& s = j["transformer"];
      reject_unknown(s, {"d_model", "num_heads", "num_layers", "d_ffn", "dropout", "max_len", "smoothing"},
                     "transformer.");
      take(s, "d_model", c.transformer.d_model);
      take(s, "num_heads", c.transformer.num_heads);
      take(s, "num_layers", c.transformer.num_layers);
      take(s, "d_ffn", c.transformer.d_ffn);
      take(s, "dropout", c.transformer.dropout);
      take(s, "max_len", c.transformer.max_len);
      take(s, "smoothing", c.transformer.smoothing);
    }
    if (j.contains("captioner")) {
      const json& s = j["captioner"];
      reject_unknown(s, {"epochs", "lr", "batch_size", "patience", "decode_max_len"}, "captioner.");
      take(s, "epochs", c.captioner.epochs);
      take(s, "lr", c.captioner.lr);
      take(s, "batch_size", c.captioner.batch_size);
      take(s, "patience", c.captioner.patience);
      take(s, "decode_max_len", c.captioner.decode_max_len);
    }
    if (j.contains("proposals")) {
      const json& s = j["proposals"];
      reject_unknown(s,
                     {"num_anchors", "kernel_sizes", "hidden", "negative_weight", "num_proposals", "epochs",
                      "batch_size", "lr"},
                     "proposals.");
      take(s, "num_anchors", c.proposals.num_anchors);
      take(s, "kernel_sizes", c.proposals.kernel_sizes);
      take(s, "hidden", c.proposals.hidden);
      take(s, "negative_weight", c.proposals.negative_weight);
      take(s, "num_proposals", c.proposals.num_proposals);
      take(s, "epochs", c.proposals.epochs);
      take(s, "batch_size", c.proposals.batch_size);
      take(s, "lr", c.proposals.adam.lr);
    }
    if (j.contains("caption")) {
      reject_unknown(j["caption"], {"top"}, "caption.");
      take(j["caption"], "top", c.caption_top);
    }
    if (j.contains("eval")) {
      reject_unknown(j["eval"], {"thresholds", "max_n"}, "eval.");
      take(j["eval"], "thresholds", c.thresholds);
      take(j["eval"], "max_n", c.max_n);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kValidation, std::string("pipeline config: ") + e.what());
  }
  c.validate();
  return c;
}

PipelineConfig load_pipeline_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kMissingFile, "cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_pipeline_config(ss.str(), path.parent_path());
}

namespace {

ordered_json config_json(const PipelineConfig& c) {
  ordered_json j;
  j["paths"] = {{"features_dir", c.features_dir.string()},
                {"annotations", c.annotations.string()},
                {"out", c.out_dir.string()},
                {"data", c.data_dir.string()}};
  j["seed"] = c.seed;
  j["clip_duration_s"] = c.clip_duration_s;
  j["val_fraction"] = c.val_fraction;
  j["synth"] = {{"num_videos", c.synth.num_videos},
                {"clips_per_video", c.synth.clips_per_video_range},
                {"num_topics", c.synth.num_topics},
                {"clusters_per_topic", c.synth.clusters_per_topic},
                {"feature_dim", c.synth.feature_dim},
                {"noise_sigma", c.synth.noise_sigma},
                {"events_per_video", c.synth.events_per_video_range},
                {"vocab", c.synth.vocab},
                {"dominant_prob", c.synth.dominant_prob}};
  j["codebook"] = {{"k", c.codebook.k}, {"epochs", c.codebook.epochs}, {"batch_size", c.codebook.batch_size}};
  j["cooccur"] = {{"window", c.window}};
  j["embed"] = {{"t_max", c.embed.t_max},       {"alpha", c.embed.alpha},
                {"lr", c.embed.lr},             {"max_iters", c.embed.max_iters},
                {"patience", c.embed.early_stop_patience}, {"d_emb", c.embed.d_emb}};
  j["transformer"] = {{"d_model", c.transformer.d_model},     {"num_heads", c.transformer.num_heads},
                      {"num_layers", c.transformer.num_layers}, {"d_ffn", c.transformer.d_ffn},
                      {"dropout", c.transformer.dropout},     {"max_len", c.transformer.max_len},
                      {"smoothing", c.transformer.smoothing}};
  j["captioner"] = {{"epochs", c.captioner.epochs},
                    {"lr", c.captioner.lr},
                    {"batch_size", c.captioner.batch_size},
                    {"patience", c.captioner.patience},
                    {"decode_max_len", c.captioner.decode_max_len}};
  j["proposals"] = {{"num_anchors", c.proposals.num_anchors},
                    {"kernel_sizes", c.proposals.kernel_sizes},
                    {"hidden", c.proposals.hidden},
                    {"negative_weight", c.proposals.negative_weight},
                    {"num_proposals", c.proposals.num_proposals},
                    {"epochs", c.proposals.epochs},
                    {"batch_size", c.proposals.batch_size},
                    {"lr", c.proposals.adam.lr}};
  j["caption"] = {{"top", c.caption_top}};
  j["eval"] = {{"thresholds", c.thresholds}, {"max_n", c.max_n}};
  return j;
}

}  // namespace

std::string dump_pipeline_config(const PipelineConfig& cfg) { return config_json(cfg).dump(1); }

// --- stage graph -------------------------------------------------------------

const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"synth",     "codebook", "cooccur",
                                              "embed",     "train-captioner-bimodal",
                                              "train-proposals", "propose", "train-captioner-vanilla",
                                              "caption",   "eval"};
  return names;
}

const std::vector<std::string>& stage_inputs(const std::string& stage) {
  static const std::map<std::string, std::vector<std::string>> deps{
      {"synth", {}},
      {"codebook", {"synth"}},
      {"cooccur", {"synth", "codebook"}},
      {"embed", {"cooccur"}},
      {"train-captioner-bimodal", {"synth", "codebook", "embed"}},
      {"train-proposals", {"synth", "codebook", "embed", "train-captioner-bimodal"}},
      {"propose", {"synth", "codebook", "embed", "train-captioner-bimodal", "train-proposals"}},
      {"train-captioner-vanilla", {"synth", "codebook", "embed"}},
      {"caption", {"synth", "codebook", "embed", "train-captioner-vanilla", "propose"}},
      {"eval", {"synth", "propose", "caption"}},
  };
  auto it = deps.find(stage == "ingest" ? "synth" : stage);
  if (it == deps.end()) throw Error(ErrorKind::kInvalidArgument, "unknown stage '" + stage + "'");
  return it->second;
}

fs::path stage_dir(const PipelineConfig& cfg, const std::string& stage) {
  if (stage == "synth" || stage == "ingest") return cfg.resolved_data_dir();
  stage_inputs(stage);
  return cfg.out_dir / stage;
}

std::pair<Eigen::Index, Eigen::Index> clip_span(double start_s, double end_s, double clip_duration_s,
                                                Eigen::Index clips) {
  auto lo = static_cast<Eigen::Index>(std::floor(start_s / clip_duration_s + 1e-9));
  auto hi = static_cast<Eigen::Index>(std::ceil(end_s / clip_duration_s - 1e-9));
  lo = std::clamp<Eigen::Index>(lo, 0, clips - 1);
  hi = std::clamp<Eigen::Index>(hi, lo + 1, clips);
  return {lo, hi - lo};
}

std::string sha256_hex(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw Error(ErrorKind::kMissingFile, "cannot open " + file.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::array<char, 1 << 16> buf{};
  while (in.read(buf.data(), buf.size()) || in.gcount() > 0) {
    EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md.data(), &len);
  EVP_MD_CTX_free(ctx);
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", md[i]);
  return hex;
}

namespace {

// --- shared loading helpers ----------------------------------------------------

struct Split {
  std::vector<std::string> train;
  std::vector<std::string> val;
};

struct Data {
  std::map<std::string, FeatureSequence> videos;
  AnnotationSet annotations;
  Split split;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kMissingFile, "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Data load_data(const PipelineConfig& cfg) {
  const fs::path dir = cfg.resolved_data_dir();
  Data d;
  d.annotations = load_annotations(dir / "annotations.json");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir / "features")) {
    if (entry.path().extension() == ".dvcf") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    FeatureSequence seq = load_features(f, cfg.clip_duration_s);
    d.videos.emplace(seq.video_id, std::move(seq));
  }
  const json split = json::parse(read_text(dir / "split.json"));
  d.split.train = split.at("train").get<std::vector<std::string>>();
  d.split.val = split.at("val").get<std::vector<std::string>>();
  for (const auto* ids : {&d.split.train, &d.split.val}) {
    for (const auto& id : *ids) {
      if (!d.videos.count(id) || !d.annotations.count(id)) {
        throw Error(ErrorKind::kValidation, "split names video '" + id + "' without features or annotations");
      }
    }
  }
  return d;
}

// Held-out videos, or the training videos when nothing was held out.
const std::vector<std::string>& eval_ids(const Data& d) { return d.split.val.empty() ? d.split.train : d.split.val; }

struct Semantic {
  Codebook codebook;
  EmbeddingParams embeddings;
  std::map<std::string, Matrix> sm;  // per-video clip descriptors
};

Semantic load_semantic(const PipelineConfig& cfg, const Data& d) {
  Semantic s;
  s.codebook = load_codebook(stage_dir(cfg, "codebook"));
  s.embeddings = load_embeddings(stage_dir(cfg, "embed"));
  for (const auto& [id, seq] : d.videos) s.sm.emplace(id, descriptors_for_rows(s.embeddings, s.codebook, seq.features));
  return s;
}

ClipInputs segment_inputs(ModelKind kind, const FeatureSequence& seq, const Matrix& sm, double start, double end) {
  const auto [lo, n] = clip_span(start, end, seq.clip_duration_s, seq.features.rows());
  ClipInputs in;
  if (kind == ModelKind::kBimodal) {
    in.visual = seq.features.middleRows(lo, n);
    in.semantic = sm.middleRows(lo, n);
  } else {
    in.visual = build_sequence_features(Matrix(seq.features.middleRows(lo, n)), Matrix(sm.middleRows(lo, n)));
  }
  return in;
}

std::vector<CaptionExample> caption_examples(ModelKind kind, const Data& d, const Semantic& s,
                                             const std::vector<std::string>& ids, const Vocabulary& vocab,
                                             std::size_t max_len) {
  std::vector<CaptionExample> out;
  for (const auto& id : ids) {
    const auto& ann = d.annotations.at(id);
    for (std::size_t e = 0; e < ann.events.size(); ++e) {
      CaptionExample ex;
      ex.video_id = id;
      ex.event = ann.events[e];
      ex.inputs = segment_inputs(kind, d.videos.at(id), s.sm.at(id), ex.event.start_s, ex.event.end_s);
      ex.tokens = vocab.encode(tokenize(ann.sentences[e]));
      if (ex.tokens.size() > max_len) ex.tokens.resize(max_len);
      out.push_back(std::move(ex));
    }
  }
  return out;
}

Vocabulary training_vocabulary(const Data& d) {
  std::vector<std::vector<std::string>> sentences;
  for (const auto& id : d.split.train) {
    for (const auto& s : d.annotations.at(id).sentences) sentences.push_back(tokenize(s));
  }
  return Vocabulary::build(sentences);
}

// --- manifest ---------------------------------------------------------------------

void write_manifest(const std::string& stage, const PipelineConfig& cfg, std::uint64_t stage_seed) {
  ordered_json inputs = ordered_json::object();
  for (const auto& up : stage_inputs(stage)) {
    const fs::path dir = stage_dir(cfg, up);
    std::vector<fs::path> files;
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
      if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) inputs[(fs::path(up) / fs::relative(f, dir)).generic_string()] = sha256_hex(f);
  }
  ordered_json m;
  m["stage"] = stage;
  m["seed"] = stage_seed;
  m["config"] = config_json(cfg);
  m["inputs"] = inputs;
  write_text(stage_dir(cfg, stage) / "manifest.json", m.dump(1) + "\n");
}

// Reports the nearest missing prerequisite first.
void require_upstream(const std::string& stage, const PipelineConfig& cfg) {
  const auto& deps = stage_inputs(stage);
  for (auto it = deps.rbegin(); it != deps.rend(); ++it) {
    const std::string& up = *it;
    if (!fs::exists(stage_dir(cfg, up) / "manifest.json")) {
      throw Error(ErrorKind::kMissingArtifact,
                  fmt::format("stage '{}' needs the artifacts of stage '{}' (missing {}); run `dvc {}` first", stage,
                              up, stage_dir(cfg, up).string(), up));
    }
  }
}

std::uint64_t stage_seed(const PipelineConfig& cfg, const std::string& stage) {
  const auto& names = stage_names();
  const auto pos = std::find(names.begin(), names.end(), stage == "ingest" ? "synth" : stage) - names.begin();
  return cfg.seed + 1000003ULL * static_cast<std::uint64_t>(pos);
}

// --- stages ---------------------------------------------------------------------------

void stage_data(const PipelineConfig& cfg, const fs::path& dir, std::uint64_t seed) {
  std::vector<FeatureSequence> videos;
  AnnotationSet ann;
  if (cfg.features_dir.empty()) {
    SynthConfig sc = cfg.synth;
    sc.seed = seed;
    sc.clip_duration_s = cfg.clip_duration_s;
    SynthCorpus corpus = synth_corpus(sc);
    videos = std::move(corpus.videos);
    ann = std::move(corpus.annotations);
  } else {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(cfg.features_dir)) {
      if (entry.path().extension() == ".dvcf") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) videos.push_back(load_features(f, cfg.clip_duration_s));
    ann = load_annotations(cfg.annotations);
  }
  std::vector<std::string> ids;
  fs::create_directories(dir / "features");
  for (const auto& v : videos) {
    if (!ann.count(v.video_id)) continue;  // unannotated videos are not used downstream
    validate(v);
    save_features(dir / "features" / (v.video_id + ".dvcf"), v);
    ids.push_back(v.video_id);
  }
  AnnotationSet kept;
  for (const auto& id : ids) kept.emplace(id, ann.at(id));
  if (kept.empty()) throw Error(ErrorKind::kValidation, "no annotated videos with features");
  save_annotations(dir / "annotations.json", kept);

  std::mt19937_64 rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::floor(cfg.val_fraction * static_cast<double>(ids.size())));
  std::vector<std::string> val(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::string> train(ids.begin() + static_cast<std::ptrdiff_t>(n_val), ids.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  ordered_json split;
  split["train"] = train;
  split["val"] = val;
  write_text(dir / "split.json", split.dump(1) + "\n");
}

void stage_codebook(const PipelineConfig& cfg, const fs::path& dir, std::uint64_t seed) {
  const Data d = load_data(cfg);
  std::vector<FeatureSequence> train;
  for (const auto& id : d.split.train) train.push_back(d.videos.at(id));
  KMeansOptions opts = cfg.codebook;
  opts.seed = seed;
  const Codebook cb = fit_minibatch_kmeans(pool_features(train), opts);
  save_codebook(dir, cb, CodebookMeta{cb.k(), cb.dim(), seed, opts.epochs});
}

void stage_cooccur(const PipelineConfig& cfg, const fs::path& dir) {
  const Data d = load_data(cfg);
  const Codebook cb = load_codebook(stage_dir(cfg, "codebook"));
  std::vector<LabelSequence> corpus;
  for (const auto& id : d.split.train) corpus.push_back({id, encode_sequence(cb, d.videos.at(id))});
  save_cooccurrences(dir / "cooccur.txt", count_cooccurrences(corpus, cb.k(), cfg.window));
}

void stage_embed(const PipelineConfig& cfg, const fs::path& dir, std::uint64_t seed) {
  const CooccurrenceMatrix z = load_cooccurrences(stage_dir(cfg, "cooccur") / "cooccur.txt");
  GloveHyper h = cfg.embed;
  h.seed = seed;
  GloveReport report;
  const EmbeddingParams p = train_embeddings(z, h, &report);
  save_embeddings(dir, p, h, report.best_loss);
}

CaptionTrainHyper caption_hyper(const PipelineConfig& cfg, std::uint64_t seed) {
  CaptionTrainHyper h;
  h.epochs = cfg.captioner.epochs;
  h.adam.lr = cfg.captioner.lr;
  h.batch_size = cfg.captioner.batch_size;
  h.patience = cfg.captioner.patience;
  h.decode_max_len = cfg.captioner.decode_max_len;
  h.seed = seed;
  return h;
}

void stage_train_captioner(ModelKind kind, const PipelineConfig& cfg, const fs::path& dir, std::uint64_t seed) {
  const Data d = load_data(cfg);
  const Semantic s = load_semantic(cfg, d);
  const Vocabulary vocab = training_vocabulary(d);
  const std::size_t d_vis = s.codebook.dim();
  const std::size_t d_sm = s.embeddings.dim();
  CaptionModel model = kind == ModelKind::kBimodal
                           ? make_caption_model(kind, cfg.transformer, vocab, d_vis, d_sm, seed)
                           : make_caption_model(kind, cfg.transformer, vocab, d_vis + d_sm, 0, seed);
  const auto train = caption_examples(kind, d, s, d.split.train, vocab, cfg.transformer.max_len);
  const auto val = caption_examples(kind, d, s, d.split.val, vocab, cfg.transformer.max_len);
  const CaptionTrainReport report = train_captioner(model, train, val, caption_hyper(cfg, seed));
  save_caption_model(dir / "model", model, seed, report.best_bleu4);
  std::string log;
  for (std::size_t e = 0; e < report.epochs_run; ++e) {
    log += fmt::format("{} {} {}\n", e + 1, report.epoch_loss[e], report.val_bleu4[e]);
  }
  write_text(dir / "training.txt", log);
}

std::vector<ProposalExample> proposal_examples(const Data& d, const Semantic& s, const std::vector<std::string>& ids) {
  std::vector<ProposalExample> out;
  for (const auto& id : ids) {
    const auto& seq = d.videos.at(id);
    out.push_back({id, {seq.features, s.sm.at(id)}, d.annotations.at(id).events, seq.clip_duration_s});
  }
  return out;
}

void stage_train_proposals(const PipelineConfig& cfg, const fs::path& dir, std::uint64_t seed) {
  const Data d = load_data(cfg);
  const Semantic s = load_semantic(cfg, d);
  const CaptionModel encoder = load_caption_model(stage_dir(cfg, "train-captioner-bimodal") / "model");
  AnnotationSet train_ann;
  for (const auto& id : d.split.train) train_ann.emplace(id, d.annotations.at(id));
  const AnchorSet anchors = fit_anchors(train_ann, cfg.proposals.num_anchors, seed);
  ProposalConfig pc = cfg.proposals;
  pc.seed = seed;
  ProposalTrainReport report;
  const ProposalHeads heads = train_proposal_module(encoder, proposal_examples(d, s, d.split.train), anchors, pc,
                                                    &report);
  save_proposal_heads(dir / "heads", heads, anchors);
  std::string log = fmt::format("0 {}\n", report.initial_loss);
  for (std::size_t e = 0; e < report.epoch_loss.size(); ++e) log += fmt::format("{} {}\n", e + 1, report.epoch_loss[e]);
  write_text(dir / "training.txt", log);
}

void stage_propose(const PipelineConfig& cfg, const fs::path& dir) {
  const Data d = load_data(cfg);
  const Semantic s = load_semantic(cfg, d);
  const CaptionModel encoder = load_caption_model(stage_dir(cfg, "train-captioner-bimodal") / "model");
  AnchorSet anchors;
  const ProposalHeads heads = load_proposal_heads(stage_dir(cfg, "train-proposals") / "heads", &anchors);
  std::string text;
  std::string flags;
  for (const auto& [id, seq] : d.videos) {
    const BimodalMemory mem = bimodal_encode(encoder, seq.features, s.sm.at(id));
    const ProposalList list =
        generate_proposals(heads, mem, anchors, seq.clip_duration_s, id, cfg.proposals.num_proposals);
    text += format_proposals(list.proposals);
    if (list.shortfall) flags += id + "\n";
  }
  write_text(dir / "proposals.txt", text);
  write_text(dir / "shortfall.txt", flags);
}

std::string caption_line(const std::string& id, double start, double end, const std::vector<std::string>& words) {
  std::string line = fmt::format("{} {} {}", id, start, end);
  for (const auto& w : words) line += " " + w;
  return line + "\n";
}

void stage_caption(const PipelineConfig& cfg, const fs::path& dir) {
  const Data d = load_data(cfg);
  const Semantic s = load_semantic(cfg, d);
  const CaptionModel model = load_caption_model(stage_dir(cfg, "train-captioner-vanilla") / "model");
  const auto proposals = parse_proposals(read_text(stage_dir(cfg, "propose") / "proposals.txt"));
  const std::size_t max_len = cfg.captioner.decode_max_len;

  std::string gt_text;
  std::string learned_text;
  for (const auto& id : eval_ids(d)) {
    const auto& seq = d.videos.at(id);
    for (const auto& e : d.annotations.at(id).events) {
      const ClipInputs in = segment_inputs(ModelKind::kVanilla, seq, s.sm.at(id), e.start_s, e.end_s);
      gt_text += caption_line(id, e.start_s, e.end_s, model.vocab.decode(greedy_decode(model, in, max_len)));
    }
    std::size_t taken = 0;
    for (const auto& p : proposals) {
      if (p.video_id != id || taken >= cfg.caption_top) continue;
      ++taken;
      const ClipInputs in = segment_inputs(ModelKind::kVanilla, seq, s.sm.at(id), p.start_s(), p.end_s());
      learned_text += caption_line(id, p.start_s(), p.end_s(), model.vocab.decode(greedy_decode(model, in, max_len)));
    }
  }
  write_text(dir / "captions_gt.txt", gt_text);
  write_text(dir / "captions_learned.txt", learned_text);
}

struct CaptionRecord {
  std::string video_id;
  Segment segment;
  TokenSeq words;
};

std::vector<CaptionRecord> parse_captions(const std::string& text) {
  std::vector<CaptionRecord> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    CaptionRecord r;
    if (!(fields >> r.video_id >> r.segment.start_s >> r.segment.end_s)) {
      throw Error(ErrorKind::kMalformed, "caption line: '" + line + "'");
    }
    std::string w;
    while (fields >> w) r.words.push_back(w);
    out.push_back(std::move(r));
  }
  return out;
}

void stage_eval(const PipelineConfig& cfg, const fs::path& dir) {
  const Data d = load_data(cfg);
  AnnotationSet gt;
  for (const auto& id : eval_ids(d)) gt.emplace(id, d.annotations.at(id));

  ProposalsByVideo props;
  for (const auto& p : parse_proposals(read_text(stage_dir(cfg, "propose") / "proposals.txt"))) {
    if (gt.count(p.video_id)) props[p.video_id].push_back({{p.start_s(), p.end_s()}, p.confidence});
  }
  const PrfReport one = proposal_prf(props, gt, cfg.thresholds, MatchRule::kGreedyOneToOne);
  const PrfReport any = proposal_prf(props, gt, cfg.thresholds, MatchRule::kAnyOverlap);

  std::vector<std::pair<std::string, double>> rows;
  rows.emplace_back("proposal_precision", one.mean.precision);
  rows.emplace_back("proposal_recall", one.mean.recall);
  rows.emplace_back("proposal_f1", one.mean.f1);
  rows.emplace_back("proposal_precision_any", any.mean.precision);
  rows.emplace_back("proposal_recall_any", any.mean.recall);
  rows.emplace_back("proposal_f1_any", any.mean.f1);

  // Ground-truth events: candidates and references line up one to one.
  const auto gt_caps = parse_captions(read_text(stage_dir(cfg, "caption") / "captions_gt.txt"));
  std::vector<TokenSeq> cands;
  std::vector<TokenSeq> refs;
  std::size_t i = 0;
  for (const auto& [id, video] : gt) {
    for (const auto& sentence : video.sentences) {
      if (i >= gt_caps.size()) throw Error(ErrorKind::kMalformed, "captions_gt.txt has too few lines");
      cands.push_back(gt_caps[i++].words);
      refs.push_back(tokenize(sentence));
    }
  }
  const auto gt_bleu = bleu(cands, refs, cfg.max_n);
  for (std::size_t n = 0; n < gt_bleu.size(); ++n) rows.emplace_back(fmt::format("bleu{}_gt", n + 1), gt_bleu[n]);

  // Learned proposals: every (caption, event) pair within the threshold.
  const auto learned = parse_captions(read_text(stage_dir(cfg, "caption") / "captions_learned.txt"));
  std::vector<double> learned_bleu(cfg.max_n, 0.0);
  for (double t : cfg.thresholds) {
    std::vector<TokenSeq> c;
    std::vector<TokenSeq> r;
    for (const auto& rec : learned) {
      const auto& video = gt.at(rec.video_id);
      for (std::size_t e = 0; e < video.events.size(); ++e) {
        if (tiou(rec.segment, {video.events[e].start_s, video.events[e].end_s}) >= t) {
          c.push_back(rec.words);
          r.push_back(tokenize(video.sentences[e]));
        }
      }
    }
    if (c.empty()) continue;
    const auto b = bleu(c, r, cfg.max_n);
    for (std::size_t n = 0; n < b.size(); ++n) learned_bleu[n] += b[n] / static_cast<double>(cfg.thresholds.size());
  }
  for (std::size_t n = 0; n < learned_bleu.size(); ++n) {
    rows.emplace_back(fmt::format("bleu{}_learned", n + 1), learned_bleu[n]);
  }
  write_text(dir / "report.txt", format_report_table(rows));
  write_text(dir / "report.kv", format_report_kv(rows));
}

}  // namespace

void run_stage(const std::string& stage, const PipelineConfig& cfg) {
  cfg.validate();
  stage_inputs(stage);
  require_upstream(stage, cfg);
  const fs::path dir = stage_dir(cfg, stage);
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::uint64_t seed = stage_seed(cfg, stage);
  try {
    if (stage == "synth" || stage == "ingest") stage_data(cfg, dir, seed);
    else if (stage == "codebook") stage_codebook(cfg, dir, seed);
    else if (stage == "cooccur") stage_cooccur(cfg, dir);
    else if (stage == "embed") stage_embed(cfg, dir, seed);
    else if (stage == "train-captioner-bimodal") stage_train_captioner(ModelKind::kBimodal, cfg, dir, seed);
    else if (stage == "train-proposals") stage_train_proposals(cfg, dir, seed);
    else if (stage == "propose") stage_propose(cfg, dir);
    else if (stage == "train-captioner-vanilla") stage_train_captioner(ModelKind::kVanilla, cfg, dir, seed);
    else if (stage == "caption") stage_caption(cfg, dir);
    else stage_eval(cfg, dir);
  } catch (...) {
    fs::remove_all(dir);  // no manifest means downstream stages refuse to run
    throw;
  }
  write_manifest(stage, cfg, seed);
}

void run_all(const PipelineConfig& cfg) {
  for (const auto& s : stage_names()) run_stage(s, cfg);
}

std::vector<std::pair<std::string, double>> read_report_kv(const fs::path& path) {
  std::vector<std::pair<std::string, double>> rows;
  std::istringstream in(read_text(path));
  std::string key;
  double v = 0.0;
  while (in >> key >> v) rows.emplace_back(key, v);
  return rows;
}

std::string format_sweep_table(const std::vector<SweepRow>& rows) {
  std::string out = fmt::format("{:>6} {:>4} {:>10} {:>14} {:>8} {:>8}\n", "|C|", "S", "bleu4_gt", "bleu4_learned",
                                "f1", "f1_any");
  for (const auto& r : rows) {
    out += fmt::format("{:>6} {:>4} {:>10.4f} {:>14.4f} {:>8.4f} {:>8.4f}\n", r.vocab_size, r.window, r.bleu4_gt,
                       r.bleu4_learned, r.f1, r.f1_any);
  }
  return out;
}

std::vector<SweepRow> sweep(const PipelineConfig& cfg, const std::vector<std::size_t>& vocab_sizes,
                            const std::vector<std::size_t>& windows) {
  if (vocab_sizes.empty() || windows.empty()) throw Error(ErrorKind::kInvalidArgument, "sweep: empty grid");
  require_upstream("codebook", cfg);
  const fs::path root = cfg.out_dir / "sweep";
  std::vector<SweepRow> rows;
  for (std::size_t k : vocab_sizes) {
    for (std::size_t s : windows) {
      PipelineConfig cell = cfg;
      cell.codebook.k = k;
      cell.window = s;
      cell.data_dir = cfg.resolved_data_dir();
      cell.out_dir = root / fmt::format("k{}_S{}", k, s);
      for (const auto& stage : stage_names()) {
        if (stage != "synth") run_stage(stage, cell);
      }
      std::map<std::string, double> kv;
      for (const auto& [key, v] : read_report_kv(stage_dir(cell, "eval") / "report.kv")) kv[key] = v;
      rows.push_back({k, s, kv.at("bleu4_gt"), kv.at("bleu4_learned"), kv.at("proposal_f1"),
                      kv.at("proposal_f1_any")});
    }
  }
  std::string kv;
  for (const auto& r : rows) {
    const std::string tag = fmt::format("k{}_S{}", r.vocab_size, r.window);
    kv += fmt::format("{}.bleu4_gt {}\n{}.bleu4_learned {}\n{}.f1 {}\n{}.f1_any {}\n", tag, r.bleu4_gt, tag,
                      r.bleu4_learned, tag, r.f1, tag, r.f1_any);
  }
  write_text(root / "report.txt", format_sweep_table(rows));
  write_text(root / "report.kv", kv);
  return rows;
}

}  // namespace semdvc
