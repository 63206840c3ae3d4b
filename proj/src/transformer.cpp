#include "semdvc/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "semdvc/error.hpp"
#include "semdvc/eval.hpp"

namespace semdvc {

using ag::Binder;
using ag::Mask;
using ag::ParamMap;
using ag::ParamStore;
using ag::Tape;
using ag::Var;

// --- vocabulary --------------------------------------------------------

Vocabulary::Vocabulary() {
  for (const char* t : {"<pad>", "<s>", "</s>", "<unk>"}) add(t);
}

void Vocabulary::add(const std::string& token) {
  if (ids_.count(token)) return;
  ids_.emplace(token, static_cast<int>(tokens_.size()));
  tokens_.push_back(token);
}

Vocabulary Vocabulary::build(const std::vector<std::vector<std::string>>& sentences, std::size_t min_freq) {
  std::map<std::string, std::size_t> freq;
  for (const auto& s : sentences)
    for (const auto& t : s) ++freq[t];
  std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary v;
  for (const auto& [tok, n] : ranked) {
    if (n >= min_freq) v.add(tok);
  }
  return v;
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  Vocabulary v;
  if (tokens.size() < 4 || tokens[0] != "<pad>" || tokens[1] != "<s>" || tokens[2] != "</s>" || tokens[3] != "<unk>") {
    throw Error(ErrorKind::kMalformed, "vocabulary must start with the reserved tokens");
  }
  for (std::size_t i = 4; i < tokens.size(); ++i) v.add(tokens[i]);
  if (v.size() != tokens.size()) throw Error(ErrorKind::kMalformed, "vocabulary has duplicate tokens");
  return v;
}

int Vocabulary::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw Error(ErrorKind::kOutOfRange, "token id " + std::to_string(id) + " outside vocabulary");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(const std::vector<std::string>& tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

std::vector<std::string> Vocabulary::decode(const std::vector<int>& ids) const {
  std::vector<std::string> out;
  for (int i : ids) {
    if (i == kPad || i == kStart || i == kEnd) continue;
    out.push_back(token(i));
  }
  return out;
}

// --- config --------------------------------------------------------------

void TransformerConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorKind::kValidation, "transformer config: " + what); };
  if (d_model < 1 || num_heads < 1 || num_layers < 1 || d_ffn < 1 || max_len < 1) fail("all sizes must be >= 1");
  if (d_model % num_heads != 0) fail("d_model must be divisible by num_heads");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
  if (!(smoothing >= 0.0 && smoothing < 1.0)) fail("smoothing must be in [0, 1)");
}

const char* to_string(ModelKind kind) { return kind == ModelKind::kVanilla ? "vanilla" : "bimodal"; }

ModelKind parse_model_kind(const std::string& s) {
  if (s == "vanilla") return ModelKind::kVanilla;
  if (s == "bimodal") return ModelKind::kBimodal;
  throw Error(ErrorKind::kInvalidArgument, "unknown model kind '" + s + "'");
}

// --- parameter layout ------------------------------------------------------

namespace {

using Index = Eigen::Index;

struct Init {
  ParamStore& ps;
  std::mt19937_64& rng;

  void linear(const std::string& name, std::size_t in, std::size_t out) {
    ps.set(name + ".w", ag::xavier(static_cast<Index>(in), static_cast<Index>(out), rng));
    ps.set(name + ".b", Matrix::Zero(1, static_cast<Index>(out)));
  }
  void norm(const std::string& name, std::size_t d) {
    ps.set(name + ".g", Matrix::Ones(1, static_cast<Index>(d)));
    ps.set(name + ".b", Matrix::Zero(1, static_cast<Index>(d)));
  }
  void mha(const std::string& name, std::size_t d) {
    for (const char* p : {"q", "k", "v", "o"}) {
      ps.set(name + ".w" + p, ag::xavier(static_cast<Index>(d), static_cast<Index>(d), rng));
      ps.set(name + ".b" + p, Matrix::Zero(1, static_cast<Index>(d)));
    }
  }
  void ffn(const std::string& name, std::size_t in, std::size_t hidden, std::size_t out) {
    ps.set(name + ".w1", ag::xavier(static_cast<Index>(in), static_cast<Index>(hidden), rng));
    ps.set(name + ".b1", Matrix::Zero(1, static_cast<Index>(hidden)));
    ps.set(name + ".w2", ag::xavier(static_cast<Index>(hidden), static_cast<Index>(out), rng));
    ps.set(name + ".b2", Matrix::Zero(1, static_cast<Index>(out)));
  }
};

std::string layer(const char* stack, std::size_t l) { return std::string(stack) + "." + std::to_string(l) + "."; }

}  // namespace

CaptionModel make_caption_model(ModelKind kind, const TransformerConfig& cfg, Vocabulary vocab,
                                std::size_t d_visual, std::size_t d_semantic, std::uint64_t seed) {
  cfg.validate();
  if (d_visual < 1) throw Error(ErrorKind::kInvalidArgument, "visual input dimension must be >= 1");
  if (kind == ModelKind::kBimodal && d_semantic < 1) {
    throw Error(ErrorKind::kInvalidArgument, "bi-modal model needs a semantic input dimension");
  }
  CaptionModel m;
  m.kind = kind;
  m.cfg = cfg;
  m.vocab = std::move(vocab);
  m.d_visual = d_visual;
  m.d_semantic = kind == ModelKind::kBimodal ? d_semantic : 0;

  std::mt19937_64 rng(seed);
  Init init{m.params, rng};
  const std::size_t d = cfg.d_model;
  const std::size_t nv = m.vocab.size();

  if (kind == ModelKind::kVanilla) {
    init.linear("enc.in", d_visual, d);
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
      const std::string p = layer("enc", l);
      init.norm(p + "ln1", d);
      init.mha(p + "self", d);
      init.norm(p + "ln2", d);
      init.ffn(p + "ffn", d, cfg.d_ffn, d);
    }
    init.norm("enc.norm", d);
  } else {
    init.linear("enc.in_v", d_visual, d);
    init.linear("enc.in_s", d_semantic, d);
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
      const std::string p = layer("enc", l);
      for (const char* s : {"_v", "_s"}) {
        init.norm(p + "ln_self" + s, d);
        init.mha(p + "self" + s, d);
        init.norm(p + "ln_cross" + s, d);
        init.mha(p + "cross" + s, d);
        init.norm(p + "ln_ffn" + s, d);
        init.ffn(p + "ffn" + s, d, cfg.d_ffn, d);
      }
    }
    init.norm("enc.norm_v", d);
    init.norm("enc.norm_s", d);
  }

  m.params.set("dec.emb", ag::xavier(static_cast<Index>(nv), static_cast<Index>(d), rng));
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const std::string p = layer("dec", l);
    init.norm(p + "ln1", d);
    init.mha(p + "self", d);
    init.norm(p + "ln2", d);
    if (kind == ModelKind::kVanilla) {
      init.mha(p + "cross", d);
    } else {
      init.mha(p + "cross_s", d);
      init.mha(p + "cross_v", d);
      init.norm(p + "ln_bridge", 2 * d);
      init.ffn(p + "bridge", 2 * d, cfg.d_ffn, d);
    }
    init.norm(p + "ln3", d);
    init.ffn(p + "ffn", d, cfg.d_ffn, d);
  }
  init.norm("dec.norm", d);
  init.linear("gen", d, nv);
  return m;
}

void tie_bimodal_streams(CaptionModel& model) {
  if (model.kind != ModelKind::kBimodal) throw Error(ErrorKind::kInvalidArgument, "tying needs a bi-modal model");
  std::vector<std::pair<std::string, Matrix>> copies;
  for (const auto& [name, value] : model.params.values()) {
    if (name.rfind("enc.", 0) != 0) continue;
    const auto pos = name.find("_v.");
    if (pos == std::string::npos) continue;
    std::string twin = name;
    twin.replace(pos, 3, "_s.");
    copies.emplace_back(twin, value);
  }
  for (auto& [name, value] : copies) {
    if (model.params.at(name).rows() != value.rows() || model.params.at(name).cols() != value.cols()) {
      throw Error(ErrorKind::kDimensionMismatch, "cannot tie '" + name + "': shapes differ");
    }
    model.params.set(name, std::move(value));
  }
}

// --- forward graph ----------------------------------------------------------

namespace {

struct Forward {
  Binder& b;
  const TransformerConfig& cfg;
  bool train = false;
  std::mt19937_64* rng = nullptr;

  Tape& tape() { return b.tape(); }

  Var drop(Var x) { return (train && rng) ? ag::dropout(x, cfg.dropout, *rng) : x; }

  Var linear(const std::string& p, Var x) { return ag::add_row(ag::matmul(x, b(p + ".w")), b(p + ".b")); }

  Var norm(const std::string& p, Var x) { return ag::layer_norm(x, b(p + ".g"), b(p + ".b")); }

  Var ffn(const std::string& p, Var x) {
    Var h = ag::relu(ag::add_row(ag::matmul(x, b(p + ".w1")), b(p + ".b1")));
    return ag::add_row(ag::matmul(h, b(p + ".w2")), b(p + ".b2"));
  }

  Var mha(const std::string& p, Var q_in, Var kv_in, const Mask* mask) {
    const auto heads = static_cast<Index>(cfg.num_heads);
    const auto dk = static_cast<Index>(cfg.d_k());
    Var q = ag::add_row(ag::matmul(q_in, b(p + ".wq")), b(p + ".bq"));
    Var k = ag::add_row(ag::matmul(kv_in, b(p + ".wk")), b(p + ".bk"));
    Var v = ag::add_row(ag::matmul(kv_in, b(p + ".wv")), b(p + ".bv"));
    std::vector<Var> outs;
    outs.reserve(static_cast<std::size_t>(heads));
    for (Index h = 0; h < heads; ++h) {
      outs.push_back(ag::attention(ag::slice_cols(q, h * dk, dk), ag::slice_cols(k, h * dk, dk),
                                   ag::slice_cols(v, h * dk, dk), mask));
    }
    Var cat = heads == 1 ? outs.front() : ag::concat_cols(outs);
    return ag::add_row(ag::matmul(cat, b(p + ".wo")), b(p + ".bo"));
  }

  Var embed_inputs(const std::string& p, const Matrix& x) {
    Var in = tape().constant(x);
    Var proj = linear(p, in);
    return drop(ag::add(proj, tape().constant(positional_encoding(static_cast<std::size_t>(x.rows()), cfg.d_model))));
  }

  Var embed_tokens(const std::vector<int>& tokens, std::size_t vocab) {
    for (int t : tokens) {
      if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
        throw Error(ErrorKind::kOutOfRange, "token id " + std::to_string(t) + " outside vocabulary");
      }
    }
    Var e = ag::scale(ag::gather_rows(b("dec.emb"), tokens), std::sqrt(static_cast<double>(cfg.d_model)));
    return drop(ag::add(e, tape().constant(positional_encoding(tokens.size(), cfg.d_model))));
  }

  Var vanilla_encoder(const Matrix& x) {
    if (x.rows() < 1) throw Error(ErrorKind::kInvalidArgument, "encoder input is empty");
    Var h = embed_inputs("enc.in", x);
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
      const std::string p = layer("enc", l);
      Var n1 = norm(p + "ln1", h);
      h = ag::add(h, drop(mha(p + "self", n1, n1, nullptr)));
      h = ag::add(h, drop(ffn(p + "ffn", norm(p + "ln2", h))));
    }
    return norm("enc.norm", h);
  }

  std::pair<Var, Var> bimodal_encoder(const Matrix& xv, const Matrix& xs) {
    if (xv.rows() < 1 || xs.rows() < 1) throw Error(ErrorKind::kInvalidArgument, "encoder stream is empty");
    Var v = embed_inputs("enc.in_v", xv);
    Var s = embed_inputs("enc.in_s", xs);
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
      const std::string p = layer("enc", l);
      Var nv = norm(p + "ln_self_v", v);
      Var ns = norm(p + "ln_self_s", s);
      v = ag::add(v, drop(mha(p + "self_v", nv, nv, nullptr)));
      s = ag::add(s, drop(mha(p + "self_s", ns, ns, nullptr)));
      Var cv = norm(p + "ln_cross_v", v);
      Var cs = norm(p + "ln_cross_s", s);
      Var v2 = ag::add(v, drop(mha(p + "cross_v", cv, cs, nullptr)));
      Var s2 = ag::add(s, drop(mha(p + "cross_s", cs, cv, nullptr)));
      v = ag::add(v2, drop(ffn(p + "ffn_v", norm(p + "ln_ffn_v", v2))));
      s = ag::add(s2, drop(ffn(p + "ffn_s", norm(p + "ln_ffn_s", s2))));
    }
    return {norm("enc.norm_v", v), norm("enc.norm_s", s)};
  }

  Var vanilla_decoder(const std::vector<int>& tokens, std::size_t vocab, Var memory) {
    if (tokens.empty()) throw Error(ErrorKind::kInvalidArgument, "decoder needs at least one token");
    const Mask causal = ag::causal_mask(static_cast<Index>(tokens.size()), static_cast<Index>(tokens.size()));
    Var y = embed_tokens(tokens, vocab);
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
      const std::string p = layer("dec", l);
      Var n1 = norm(p + "ln1", y);
      y = ag::add(y, drop(mha(p + "self", n1, n1, &causal)));
      y = ag::add(y, drop(mha(p + "cross", norm(p + "ln2", y), memory, nullptr)));
      y = ag::add(y, drop(ffn(p + "ffn", norm(p + "ln3", y))));
    }
    return linear("gen", norm("dec.norm", y));
  }

  Var bimodal_decoder(const std::vector<int>& tokens, std::size_t vocab, Var mem_v, Var mem_s) {
    if (tokens.empty()) throw Error(ErrorKind::kInvalidArgument, "decoder needs at least one token");
    const Mask causal = ag::causal_mask(static_cast<Index>(tokens.size()), static_cast<Index>(tokens.size()));
    Var y = embed_tokens(tokens, vocab);
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
      const std::string p = layer("dec", l);
      Var n1 = norm(p + "ln1", y);
      y = ag::add(y, drop(mha(p + "self", n1, n1, &causal)));
      // Both cross-attentions read the same self-attended words.
      Var q = norm(p + "ln2", y);
      Var a_s = ag::add(y, drop(mha(p + "cross_s", q, mem_s, nullptr)));
      Var a_v = ag::add(y, drop(mha(p + "cross_v", q, mem_v, nullptr)));
      Var bridged = ffn(p + "bridge", norm(p + "ln_bridge", ag::concat_cols({a_s, a_v})));
      y = ag::add(y, drop(bridged));
      y = ag::add(y, drop(ffn(p + "ffn", norm(p + "ln3", y))));
    }
    return linear("gen", norm("dec.norm", y));
  }

  Var logits(const CaptionModel& m, const std::vector<int>& tokens, const ClipInputs& in) {
    if (m.kind == ModelKind::kVanilla) {
      check_width(in.visual, m.d_visual, "visual");
      return vanilla_decoder(tokens, m.vocab.size(), vanilla_encoder(in.visual));
    }
    check_width(in.visual, m.d_visual, "visual");
    check_width(in.semantic, m.d_semantic, "semantic");
    auto [v, s] = bimodal_encoder(in.visual, in.semantic);
    return bimodal_decoder(tokens, m.vocab.size(), v, s);
  }

  static void check_width(const Matrix& x, std::size_t d, const char* what) {
    if (static_cast<std::size_t>(x.cols()) != d) {
      throw Error(ErrorKind::kDimensionMismatch, std::string(what) + " input has width " + std::to_string(x.cols()) +
                                                     ", model expects " + std::to_string(d));
    }
  }
};

void teacher_forcing(const std::vector<int>& sentence, std::vector<int>& inputs, std::vector<int>& targets) {
  inputs.assign(1, Vocabulary::kStart);
  inputs.insert(inputs.end(), sentence.begin(), sentence.end());
  targets.assign(sentence.begin(), sentence.end());
  targets.push_back(Vocabulary::kEnd);
}

}  // namespace

// --- plain-matrix building blocks -----------------------------------------------

Matrix positional_encoding(std::size_t n, std::size_t d_model) {
  Matrix pe(static_cast<Index>(n), static_cast<Index>(d_model));
  for (std::size_t pos = 0; pos < n; ++pos) {
    for (std::size_t c = 0; c < d_model; ++c) {
      const double i2 = static_cast<double>(c - c % 2);
      const double angle = static_cast<double>(pos) / std::pow(10000.0, i2 / static_cast<double>(d_model));
      pe(static_cast<Index>(pos), static_cast<Index>(c)) = c % 2 == 0 ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

Matrix attention(const Matrix& q, const Matrix& k, const Matrix& v, const Mask* mask) {
  Tape t(false);
  return ag::attention(t.constant(q), t.constant(k), t.constant(v), mask).value();
}

Matrix multi_head_attention(const MhaWeights& p, const Matrix& q, const Matrix& k, const Matrix& v, const Mask* mask) {
  const Index d = p.wq.cols();
  if (p.num_heads < 1 || d % static_cast<Index>(p.num_heads) != 0) {
    throw Error(ErrorKind::kDimensionMismatch, "multi_head_attention: width not divisible by head count");
  }
  if (p.wq.rows() != q.cols() || p.wk.rows() != k.cols() || p.wv.rows() != v.cols() || p.wo.rows() != d ||
      p.wk.cols() != d || p.wv.cols() != d) {
    throw Error(ErrorKind::kDimensionMismatch, "multi_head_attention: projection shapes");
  }
  Tape t(false);
  auto lin = [&](const Matrix& x, const Matrix& w, const Matrix& b) {
    return ag::add_row(ag::matmul(t.constant(x), t.constant(w)), t.constant(b));
  };
  Var qq = lin(q, p.wq, p.bq);
  Var kk = lin(k, p.wk, p.bk);
  Var vv = lin(v, p.wv, p.bv);
  const Index dk = d / static_cast<Index>(p.num_heads);
  std::vector<Var> heads;
  for (Index h = 0; h < static_cast<Index>(p.num_heads); ++h) {
    heads.push_back(ag::attention(ag::slice_cols(qq, h * dk, dk), ag::slice_cols(kk, h * dk, dk),
                                  ag::slice_cols(vv, h * dk, dk), mask));
  }
  Var cat = ag::concat_cols(heads);
  return ag::add_row(ag::matmul(cat, t.constant(p.wo)), t.constant(p.bo)).value();
}

Matrix ffn(const FfnWeights& p, const Matrix& u) {
  Tape t(false);
  Var h = ag::relu(ag::add_row(ag::matmul(t.constant(u), t.constant(p.w1)), t.constant(p.b1)));
  return ag::add_row(ag::matmul(h, t.constant(p.w2)), t.constant(p.b2)).value();
}

// --- eval-mode model forward -------------------------------------------------------

Matrix vanilla_encode(const CaptionModel& m, const Matrix& clip_features) {
  if (m.kind != ModelKind::kVanilla) throw Error(ErrorKind::kInvalidArgument, "vanilla_encode on a bi-modal model");
  Forward::check_width(clip_features, m.d_visual, "visual");
  Tape t(false);
  Binder b(t, m.params, false);
  Forward f{b, m.cfg};
  return f.vanilla_encoder(clip_features).value();
}

Matrix vanilla_decode(const CaptionModel& m, const std::vector<int>& tokens, const Matrix& memory) {
  if (m.kind != ModelKind::kVanilla) throw Error(ErrorKind::kInvalidArgument, "vanilla_decode on a bi-modal model");
  if (tokens.size() > m.cfg.max_len + 1) throw Error(ErrorKind::kInvalidArgument, "target longer than max_len");
  Tape t(false);
  Binder b(t, m.params, false);
  Forward f{b, m.cfg};
  return f.vanilla_decoder(tokens, m.vocab.size(), t.constant(memory)).value();
}

BimodalMemory bimodal_encode(const CaptionModel& m, const Matrix& visual, const Matrix& semantic) {
  if (m.kind != ModelKind::kBimodal) throw Error(ErrorKind::kInvalidArgument, "bimodal_encode on a vanilla model");
  Forward::check_width(visual, m.d_visual, "visual");
  Forward::check_width(semantic, m.d_semantic, "semantic");
  Tape t(false);
  Binder b(t, m.params, false);
  Forward f{b, m.cfg};
  auto [v, s] = f.bimodal_encoder(visual, semantic);
  return {v.value(), s.value()};
}

Matrix bimodal_decode(const CaptionModel& m, const std::vector<int>& tokens, const BimodalMemory& enc) {
  if (m.kind != ModelKind::kBimodal) throw Error(ErrorKind::kInvalidArgument, "bimodal_decode on a vanilla model");
  if (tokens.size() > m.cfg.max_len + 1) throw Error(ErrorKind::kInvalidArgument, "target longer than max_len");
  Tape t(false);
  Binder b(t, m.params, false);
  Forward f{b, m.cfg};
  return f.bimodal_decoder(tokens, m.vocab.size(), t.constant(enc.visual), t.constant(enc.semantic)).value();
}

Matrix decode_logits(const CaptionModel& m, const std::vector<int>& tokens, const ClipInputs& inputs) {
  Tape t(false);
  Binder b(t, m.params, false);
  Forward f{b, m.cfg};
  return f.logits(m, tokens, inputs).value();
}

double label_smoothed_kl(const Matrix& logits, const std::vector<int>& targets, double smoothing, int pad_id) {
  Tape t(false);
  return ag::label_smoothed_kl(t.constant(logits), targets, smoothing, pad_id).value()(0, 0);
}

// --- training -----------------------------------------------------------------------

double example_loss(const CaptionModel& m, const CaptionExample& ex, ParamMap* grads) {
  std::vector<int> inputs;
  std::vector<int> targets;
  teacher_forcing(ex.tokens, inputs, targets);
  Tape t(grads != nullptr);
  Binder b(t, m.params, grads != nullptr);
  Forward f{b, m.cfg};
  Var loss = ag::label_smoothed_kl(f.logits(m, inputs, ex.inputs), targets, m.cfg.smoothing, Vocabulary::kPad);
  if (grads) {
    t.backward(loss);
    *grads = b.gradients();
  }
  return loss.value()(0, 0);
}

double teacher_forced_accuracy(const CaptionModel& m, const std::vector<CaptionExample>& examples) {
  std::size_t hit = 0;
  std::size_t total = 0;
  std::vector<int> inputs;
  std::vector<int> targets;
  for (const auto& ex : examples) {
    teacher_forcing(ex.tokens, inputs, targets);
    const Matrix logits = decode_logits(m, inputs, ex.inputs);
    for (Index r = 0; r < logits.rows(); ++r) {
      const int tgt = targets[static_cast<std::size_t>(r)];
      if (tgt == Vocabulary::kPad) continue;
      Index best = 0;
      logits.row(r).maxCoeff(&best);
      hit += static_cast<int>(best) == tgt ? 1 : 0;
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(total);
}

std::vector<int> greedy_decode(const CaptionModel& m, const ClipInputs& inputs, std::size_t max_len) {
  std::vector<int> tokens{Vocabulary::kStart};
  if (m.kind == ModelKind::kVanilla) {
    const Matrix memory = vanilla_encode(m, inputs.visual);
    while (tokens.size() <= max_len) {
      const Matrix logits = vanilla_decode(m, tokens, memory);
      Index best = 0;
      logits.row(logits.rows() - 1).maxCoeff(&best);
      if (best == Vocabulary::kEnd) break;
      tokens.push_back(static_cast<int>(best));
    }
  } else {
    const BimodalMemory memory = bimodal_encode(m, inputs.visual, inputs.semantic);
    while (tokens.size() <= max_len) {
      const Matrix logits = bimodal_decode(m, tokens, memory);
      Index best = 0;
      logits.row(logits.rows() - 1).maxCoeff(&best);
      if (best == Vocabulary::kEnd) break;
      tokens.push_back(static_cast<int>(best));
    }
  }
  return {tokens.begin() + 1, tokens.end()};
}

double caption_bleu4(const CaptionModel& m, const std::vector<CaptionExample>& examples, std::size_t max_len) {
  if (examples.empty()) return 0.0;
  std::vector<TokenSeq> cands;
  std::vector<TokenSeq> refs;
  for (const auto& ex : examples) {
    cands.push_back(m.vocab.decode(greedy_decode(m, ex.inputs, max_len)));
    refs.push_back(m.vocab.decode(ex.tokens));
  }
  return bleu(cands, refs, 4).back();
}

CaptionTrainReport train_captioner(CaptionModel& model, const std::vector<CaptionExample>& train,
                                   const std::vector<CaptionExample>& val, const CaptionTrainHyper& hyper) {
  if (train.empty()) throw Error(ErrorKind::kInvalidArgument, "train_captioner: empty dataset");
  if (hyper.batch_size < 1) throw Error(ErrorKind::kInvalidArgument, "batch_size must be >= 1");
  model.cfg.validate();
  const std::vector<CaptionExample>& monitor = val.empty() ? train : val;

  CaptionTrainReport report;
  double init = 0.0;
  for (const auto& ex : train) init += example_loss(model, ex);
  report.initial_loss = init / static_cast<double>(train.size());

  ag::Adam adam(hyper.adam);
  std::mt19937_64 rng(hyper.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  ParamStore best = model.params;
  double best_bleu = -1.0;
  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  std::vector<int> inputs;
  std::vector<int> targets;

  for (std::size_t epoch = 1; epoch <= hyper.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += hyper.batch_size) {
      const std::size_t end = std::min(order.size(), begin + hyper.batch_size);
      const double w = 1.0 / static_cast<double>(end - begin);
      ParamMap grads;
      for (std::size_t i = begin; i < end; ++i) {
        const CaptionExample& ex = train[order[i]];
        teacher_forcing(ex.tokens, inputs, targets);
        Tape t(true);
        Binder b(t, model.params, true);
        Forward f{b, model.cfg, true, &rng};
        Var loss = ag::label_smoothed_kl(f.logits(model, inputs, ex.inputs), targets, model.cfg.smoothing,
                                         Vocabulary::kPad);
        t.backward(loss);
        ag::accumulate(grads, b.gradients(), w);
        epoch_loss += loss.value()(0, 0);
      }
      adam.step(model.params, grads);
    }
    epoch_loss /= static_cast<double>(train.size());
    report.epoch_loss.push_back(epoch_loss);
    report.epochs_run = epoch;

    const double score = caption_bleu4(model, monitor, hyper.decode_max_len);
    report.val_bleu4.push_back(score);
    const bool better = score > best_bleu + 1e-12 || (std::abs(score - best_bleu) <= 1e-12 && epoch_loss < best_loss);
    if (better) {
      best_bleu = score;
      best_loss = epoch_loss;
      best = model.params;
      report.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= hyper.patience) {
      break;
    }
  }
  report.best_bleu4 = std::max(best_bleu, 0.0);
  model.params = std::move(best);
  return report;
}

// --- persistence -----------------------------------------------------------------------

void save_caption_model(const std::filesystem::path& dir, const CaptionModel& m, std::uint64_t seed,
                        double best_score) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["kind"] = to_string(m.kind);
  manifest["d_model"] = m.cfg.d_model;
  manifest["num_heads"] = m.cfg.num_heads;
  manifest["num_layers"] = m.cfg.num_layers;
  manifest["d_ffn"] = m.cfg.d_ffn;
  manifest["dropout"] = m.cfg.dropout;
  manifest["max_len"] = m.cfg.max_len;
  manifest["smoothing"] = m.cfg.smoothing;
  manifest["d_visual"] = m.d_visual;
  manifest["d_semantic"] = m.d_semantic;
  manifest["seed"] = seed;
  manifest["best_validation_bleu4"] = best_score;
  manifest["vocabulary"] = m.vocab.tokens();
  std::vector<std::string> names;
  for (const auto& [name, value] : m.params.values()) {
    save_matrix(dir / (name + ".dvcf"), value);
    names.push_back(name);
  }
  manifest["params"] = names;
  std::ofstream out(dir / "model.json", std::ios::trunc);
  out << manifest.dump(1) << "\n";
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + (dir / "model.json").string());
}

CaptionModel load_caption_model(const std::filesystem::path& dir) {
  std::ifstream in(dir / "model.json");
  if (!in) throw Error(ErrorKind::kMissingFile, "cannot open " + (dir / "model.json").string());
  nlohmann::json manifest;
  try {
    in >> manifest;
    CaptionModel m;
    m.kind = parse_model_kind(manifest.at("kind").get<std::string>());
    m.cfg.d_model = manifest.at("d_model").get<std::size_t>();
    m.cfg.num_heads = manifest.at("num_heads").get<std::size_t>();
    m.cfg.num_layers = manifest.at("num_layers").get<std::size_t>();
    m.cfg.d_ffn = manifest.at("d_ffn").get<std::size_t>();
    m.cfg.dropout = manifest.at("dropout").get<double>();
    m.cfg.max_len = manifest.at("max_len").get<std::size_t>();
    m.cfg.smoothing = manifest.at("smoothing").get<double>();
    m.cfg.validate();
    m.d_visual = manifest.at("d_visual").get<std::size_t>();
    m.d_semantic = manifest.at("d_semantic").get<std::size_t>();
    m.vocab = Vocabulary::from_tokens(manifest.at("vocabulary").get<std::vector<std::string>>());
    for (const auto& name : manifest.at("params")) {
      const auto n = name.get<std::string>();
      m.params.set(n, load_matrix(dir / (n + ".dvcf")));
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kMalformed, (dir / "model.json").string() + ": " + e.what());
  }
}

}  // namespace semdvc
