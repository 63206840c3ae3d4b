#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "semdvc/autograd.hpp"
#include "semdvc/dataset.hpp"

namespace semdvc {

// Token <-> id map with reserved ids for padding, start, end and unknown.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kStart = 1;
  static constexpr int kEnd = 2;
  static constexpr int kUnk = 3;

  Vocabulary();
  // Adds every token seen at least min_freq times, most frequent first
  // (ties alphabetical).
  static Vocabulary build(const std::vector<std::vector<std::string>>& sentences, std::size_t min_freq = 1);

  int id(const std::string& token) const;  // kUnk when absent
  const std::string& token(int id) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<int> encode(const std::vector<std::string>& tokens) const;
  // Drops reserved ids.
  std::vector<std::string> decode(const std::vector<int>& ids) const;

  static Vocabulary from_tokens(std::vector<std::string> tokens);

 private:
  void add(const std::string& token);

  std::vector<std::string> tokens_;
  std::map<std::string, int> ids_;
};

struct TransformerConfig {
  std::size_t d_model = 128;
  std::size_t num_heads = 4;
  std::size_t num_layers = 2;
  std::size_t d_ffn = 256;
  double dropout = 0.1;
  std::size_t max_len = 30;
  double smoothing = 0.1;

  std::size_t d_k() const { return d_model / num_heads; }
  void validate() const;
};

enum class ModelKind { kVanilla, kBimodal };
const char* to_string(ModelKind kind);
ModelKind parse_model_kind(const std::string& s);

// Per-clip inputs. The vanilla model reads only `visual` (which may already
// be the visual+semantic concatenation); the bi-modal model reads both.
struct ClipInputs {
  Matrix visual;
  Matrix semantic;
};

struct CaptionModel {
  ModelKind kind = ModelKind::kVanilla;
  TransformerConfig cfg;
  Vocabulary vocab;
  std::size_t d_visual = 0;
  std::size_t d_semantic = 0;  // bi-modal only
  ag::ParamStore params;
};

CaptionModel make_caption_model(ModelKind kind, const TransformerConfig& cfg, Vocabulary vocab,
                                std::size_t d_visual, std::size_t d_semantic, std::uint64_t seed);

// Copies every visual-stream encoder block onto its semantic twin.
void tie_bimodal_streams(CaptionModel& model);

// --- building blocks on plain matrices ---------------------------------

// PE(pos, 2i) = sin(pos / 10000^(2i/d)), PE(pos, 2i+1) = cos(same angle).
Matrix positional_encoding(std::size_t n, std::size_t d_model);

Matrix attention(const Matrix& q, const Matrix& k, const Matrix& v, const ag::Mask* mask = nullptr);

// Per-head projections are the column blocks of wq/wk/wv (d_model x d_model).
struct MhaWeights {
  Matrix wq, bq, wk, bk, wv, bv, wo, bo;
  std::size_t num_heads = 1;
};
Matrix multi_head_attention(const MhaWeights& p, const Matrix& q, const Matrix& k, const Matrix& v,
                            const ag::Mask* mask = nullptr);

struct FfnWeights {
  Matrix w1, b1, w2, b2;
};
// max(0, u W1 + b1) W2 + b2, row by row.
Matrix ffn(const FfnWeights& p, const Matrix& u);

// --- model forward (eval mode) -----------------------------------------

Matrix vanilla_encode(const CaptionModel& m, const Matrix& clip_features);
Matrix vanilla_decode(const CaptionModel& m, const std::vector<int>& tokens, const Matrix& memory);

struct BimodalMemory {
  Matrix visual;    // visual stream after attending to the semantic one
  Matrix semantic;  // semantic stream after attending to the visual one
};
BimodalMemory bimodal_encode(const CaptionModel& m, const Matrix& visual, const Matrix& semantic);
Matrix bimodal_decode(const CaptionModel& m, const std::vector<int>& tokens, const BimodalMemory& enc);

// Dispatches on the model kind; returns logits (one row per token).
Matrix decode_logits(const CaptionModel& m, const std::vector<int>& tokens, const ClipInputs& inputs);

// Target distribution puts 1 - smoothing on the true token and spreads
// smoothing evenly over the other non-pad tokens; KL against the predicted
// distribution, averaged over non-pad rows.
double label_smoothed_kl(const Matrix& logits, const std::vector<int>& targets, double smoothing, int pad_id);

// --- training ------------------------------------------------------------

struct CaptionExample {
  std::string video_id;
  Event event;
  ClipInputs inputs;
  std::vector<int> tokens;  // sentence ids without start/end
};

// Teacher forcing: inputs [start, y...], targets [y..., end]; optional gradients.
double example_loss(const CaptionModel& m, const CaptionExample& ex, ag::ParamMap* grads = nullptr);

struct CaptionTrainHyper {
  std::size_t epochs = 60;
  ag::AdamOptions adam;
  std::size_t batch_size = 16;
  std::size_t patience = 10;   // epochs without validation improvement
  std::uint64_t seed = 0;
  std::size_t decode_max_len = 30;
};

struct CaptionTrainReport {
  double initial_loss = 0.0;
  std::vector<double> epoch_loss;  // mean training loss during each epoch
  std::vector<double> val_bleu4;
  std::size_t best_epoch = 0;
  double best_bleu4 = 0.0;
  std::size_t epochs_run = 0;
};

// Adam over mini-batches of examples; keeps the parameters with the best
// validation BLEU@4 (ties go to the lower training loss). Validation falls
// back to the training set when `val` is empty.
CaptionTrainReport train_captioner(CaptionModel& model, const std::vector<CaptionExample>& train,
                                   const std::vector<CaptionExample>& val, const CaptionTrainHyper& hyper);

// Fraction of non-pad next-token predictions that match under teacher forcing.
double teacher_forced_accuracy(const CaptionModel& m, const std::vector<CaptionExample>& examples);

// Starts from <start>, appends the argmax token until <end> or max_len tokens.
std::vector<int> greedy_decode(const CaptionModel& m, const ClipInputs& inputs, std::size_t max_len);

// Corpus BLEU@4 of greedy captions against the examples' sentences.
double caption_bleu4(const CaptionModel& m, const std::vector<CaptionExample>& examples, std::size_t max_len);

// Directory of DVCF matrices (one per parameter) plus model.json.
void save_caption_model(const std::filesystem::path& dir, const CaptionModel& m, std::uint64_t seed,
                        double best_score);
CaptionModel load_caption_model(const std::filesystem::path& dir);

}  // namespace semdvc
