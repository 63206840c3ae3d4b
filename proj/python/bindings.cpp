#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "semdvc/codebook.hpp"
#include "semdvc/cooccur.hpp"
#include "semdvc/error.hpp"
#include "semdvc/eval.hpp"
#include "semdvc/pipeline.hpp"
#include "semdvc/proposals.hpp"
#include "semdvc/semvec.hpp"
#include "semdvc/transformer.hpp"

namespace py = pybind11;
using namespace semdvc;

namespace {

// (start, end, confidence) triples per video; GT as (start, end) pairs.
using PyProposals = std::map<std::string, std::vector<std::tuple<double, double, double>>>;
using PyEvents = std::map<std::string, std::vector<std::pair<double, double>>>;

py::dict scores(const PrfScores& s) {
  py::dict d;
  d["precision"] = s.precision;
  d["recall"] = s.recall;
  d["f1"] = s.f1;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Semantic descriptors and dense video captioning at desk scale";

  static py::exception<Error> exc(m, "SemdvcError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::set_error(exc, (std::string(to_string(e.kind())) + ": " + e.what()).c_str());
    }
  });

  // dataset
  py::class_<SynthConfig>(m, "SynthConfig")
      .def(py::init<>())
      .def_readwrite("num_videos", &SynthConfig::num_videos)
      .def_readwrite("clips_per_video_range", &SynthConfig::clips_per_video_range)
      .def_readwrite("num_topics", &SynthConfig::num_topics)
      .def_readwrite("clusters_per_topic", &SynthConfig::clusters_per_topic)
      .def_readwrite("feature_dim", &SynthConfig::feature_dim)
      .def_readwrite("noise_sigma", &SynthConfig::noise_sigma)
      .def_readwrite("events_per_video_range", &SynthConfig::events_per_video_range)
      .def_readwrite("dominant_prob", &SynthConfig::dominant_prob)
      .def_readwrite("seed", &SynthConfig::seed);

  m.def(
      "synth_corpus",
      [](const SynthConfig& cfg) {
        const SynthCorpus c = synth_corpus(cfg);
        py::dict features, annotations, topics;
        for (const auto& v : c.videos) features[py::str(v.video_id)] = v.features;
        for (const auto& [id, a] : c.annotations) {
          py::dict d;
          d["duration"] = a.duration_s;
          std::vector<std::pair<double, double>> ts;
          for (const auto& e : a.events) ts.emplace_back(e.start_s, e.end_s);
          d["timestamps"] = ts;
          d["sentences"] = a.sentences;
          annotations[py::str(id)] = d;
        }
        for (const auto& [id, t] : c.truth.clip_topic) topics[py::str(id)] = t;
        return py::make_tuple(features, annotations, topics);
      },
      py::arg("cfg"), "Returns (features by video, annotations, per-clip topics).");
  m.def("tokenize", &tokenize);
  m.def("save_matrix", &save_matrix);
  m.def("load_matrix", &load_matrix);

  // codebook
  m.def(
      "fit_codebook",
      [](const Matrix& x, std::size_t k, std::size_t epochs, std::size_t batch_size, std::uint64_t seed) {
        return fit_minibatch_kmeans(x, {k, epochs, batch_size, seed}).centers;
      },
      py::arg("features"), py::arg("k"), py::arg("epochs") = 5, py::arg("batch_size") = 1024, py::arg("seed") = 0);
  m.def(
      "assign", [](const Matrix& centers, const Matrix& rows) { return encode_rows(Codebook{centers}, rows); },
      py::arg("centers"), py::arg("rows"));
  m.def(
      "inertia", [](const Matrix& centers, const Matrix& rows) { return inertia(Codebook{centers}, rows); },
      py::arg("centers"), py::arg("rows"));

  // co-occurrence and embeddings
  m.def(
      "cooccurrences",
      [](const std::vector<LabelList>& seqs, std::size_t k, std::size_t window) {
        std::vector<LabelSequence> corpus;
        for (const auto& s : seqs) corpus.push_back({"", s});
        const auto z = count_cooccurrences(corpus, k, window);
        Matrix dense = Matrix::Zero(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k));
        for (const auto& [ij, c] : z.entries()) {
          dense(static_cast<Eigen::Index>(ij.first), static_cast<Eigen::Index>(ij.second)) = c;
        }
        return dense;
      },
      py::arg("sequences"), py::arg("k"), py::arg("window"), "Dense k x k count matrix.");
  m.def("weight", &weight, py::arg("t"), py::arg("t_max") = 100.0, py::arg("alpha") = 0.75);
  m.def(
      "train_embeddings",
      [](const Matrix& dense, std::size_t d_emb, std::size_t max_iters, double lr, std::uint64_t seed) {
        CooccurrenceMatrix z(static_cast<std::size_t>(dense.rows()), 1);
        for (Eigen::Index i = 0; i < dense.rows(); ++i) {
          for (Eigen::Index j = 0; j < dense.cols(); ++j) {
            if (dense(i, j) != 0.0) z.add(static_cast<std::size_t>(i), static_cast<std::size_t>(j), dense(i, j));
          }
        }
        GloveHyper h;
        h.d_emb = d_emb;
        h.max_iters = max_iters;
        h.lr = lr;
        h.seed = seed;
        GloveReport rep;
        const EmbeddingParams p = train_embeddings(z, h, &rep);
        return py::make_tuple(p.w, rep.best_loss);
      },
      py::arg("z"), py::arg("d_emb") = 128, py::arg("max_iters") = 1500, py::arg("lr") = 0.05, py::arg("seed") = 0,
      "Returns (cluster vectors, best loss).");

  // transformer building blocks
  m.def("positional_encoding", &positional_encoding, py::arg("n"), py::arg("d_model"));
  m.def(
      "attention", [](const Matrix& q, const Matrix& k, const Matrix& v) { return attention(q, k, v); },
      py::arg("q"), py::arg("k"), py::arg("v"));

  // proposals
  m.def(
      "fit_anchors",
      [](const std::vector<double>& lengths, std::size_t n, std::uint64_t seed) {
        return fit_anchors(lengths, n, seed).priors;
      },
      py::arg("lengths"), py::arg("num_anchors"), py::arg("seed") = 0);

  // eval
  m.def(
      "tiou", [](std::pair<double, double> a, std::pair<double, double> b) {
        return tiou({a.first, a.second}, {b.first, b.second});
      });
  m.def(
      "bleu",
      [](const std::vector<TokenSeq>& cand, const std::vector<TokenSeq>& ref, std::size_t max_n) {
        return bleu(cand, ref, max_n);
      },
      py::arg("candidates"), py::arg("references"), py::arg("max_n") = 4);
  m.def(
      "proposal_prf",
      [](const PyProposals& props, const PyEvents& gt, const std::vector<double>& thresholds, bool any_overlap) {
        ProposalsByVideo p;
        for (const auto& [id, list] : props) {
          for (const auto& [s, e, c] : list) p[id].push_back({{s, e}, c});
        }
        AnnotationSet a;
        for (const auto& [id, list] : gt) {
          VideoAnnotation v;
          for (const auto& [s, e] : list) {
            v.events.push_back({s, e});
            v.sentences.emplace_back();
            v.duration_s = std::max(v.duration_s, e);
          }
          a[id] = v;
        }
        return scores(
            proposal_prf(p, a, thresholds, any_overlap ? MatchRule::kAnyOverlap : MatchRule::kGreedyOneToOne).mean);
      },
      py::arg("proposals"), py::arg("gt"), py::arg("thresholds") = std::vector<double>{0.3, 0.5, 0.7, 0.9},
      py::arg("any_overlap") = false);

  // pipeline
  m.def("stage_names", &stage_names);
  m.def(
      "run_stage",
      [](const std::string& stage, const std::filesystem::path& config, std::optional<std::filesystem::path> out) {
        PipelineConfig cfg = load_pipeline_config(config);
        if (out) cfg.out_dir = *out;
        py::gil_scoped_release release;
        run_stage(stage, cfg);
      },
      py::arg("stage"), py::arg("config"), py::arg("out") = py::none());
  m.def(
      "run_all",
      [](const std::filesystem::path& config, std::optional<std::filesystem::path> out) {
        PipelineConfig cfg = load_pipeline_config(config);
        if (out) cfg.out_dir = *out;
        py::gil_scoped_release release;
        run_all(cfg);
      },
      py::arg("config"), py::arg("out") = py::none());
  m.def("read_report", [](const std::filesystem::path& p) {
    py::dict d;
    for (const auto& [k, v] : read_report_kv(p)) d[py::str(k)] = v;
    return d;
  });
}
