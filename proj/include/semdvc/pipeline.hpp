#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "semdvc/codebook.hpp"
#include "semdvc/dataset.hpp"
#include "semdvc/proposals.hpp"
#include "semdvc/semvec.hpp"
#include "semdvc/transformer.hpp"

namespace semdvc {

struct CaptionerSettings {
  std::size_t epochs = 60;
  double lr = 5e-5;
  std::size_t batch_size = 16;
  std::size_t patience = 10;
  std::size_t decode_max_len = 30;
};

struct PipelineConfig {
  // Empty features_dir means the data stage synthesizes a corpus instead.
  std::filesystem::path features_dir;
  std::filesystem::path annotations;
  std::filesystem::path out_dir = "out";
  // Where data-stage artifacts live; defaults to out_dir / "data".
  std::filesystem::path data_dir;

  std::uint64_t seed = 1;
  double clip_duration_s = kDefaultClipDuration;
  double val_fraction = 0.2;

  SynthConfig synth;
  KMeansOptions codebook;
  std::size_t window = 2;
  GloveHyper embed;
  TransformerConfig transformer;
  CaptionerSettings captioner;
  ProposalConfig proposals;
  std::size_t caption_top = 100;  // learned proposals captioned per video
  std::vector<double> thresholds{0.3, 0.5, 0.7, 0.9};
  std::size_t max_n = 4;

  std::filesystem::path resolved_data_dir() const { return data_dir.empty() ? out_dir / "data" : data_dir; }
  void validate() const;
};

// Missing keys keep their defaults; unknown keys are rejected. Relative
// paths resolve against `base`.
PipelineConfig parse_pipeline_config(const std::string& json_text, const std::filesystem::path& base = {});
PipelineConfig load_pipeline_config(const std::filesystem::path& path);
std::string dump_pipeline_config(const PipelineConfig& cfg);

// In dependency order.
const std::vector<std::string>& stage_names();
// Declared upstream stages whose artifacts a stage reads.
const std::vector<std::string>& stage_inputs(const std::string& stage);
std::filesystem::path stage_dir(const PipelineConfig& cfg, const std::string& stage);

// Clears the stage directory, writes its artifacts and a manifest.json
// (config, seed, SHA-256 of every input file).
void run_stage(const std::string& stage, const PipelineConfig& cfg);
void run_all(const PipelineConfig& cfg);

std::string sha256_hex(const std::filesystem::path& file);

// First clip row and row count covering [start_s, end_s], rounded outward
// to clip boundaries and kept inside the sequence.
std::pair<Eigen::Index, Eigen::Index> clip_span(double start_s, double end_s, double clip_duration_s,
                                                Eigen::Index clips);

struct SweepRow {
  std::size_t vocab_size = 0;
  std::size_t window = 0;
  double bleu4_gt = 0.0;       // vanilla captioner on ground-truth events
  double bleu4_learned = 0.0;  // on learned proposals
  double f1 = 0.0;             // proposals, one-to-one matching
  double f1_any = 0.0;         // proposals, any-overlap matching
};

// Requires the data stage under cfg. Each grid point runs codebook..eval in
// out_dir/sweep/k<K>_S<S>; the table goes to out_dir/sweep/report.{txt,kv}.
std::vector<SweepRow> sweep(const PipelineConfig& cfg, const std::vector<std::size_t>& vocab_sizes,
                            const std::vector<std::size_t>& windows);
std::string format_sweep_table(const std::vector<SweepRow>& rows);

// "key value" report written by the eval stage.
std::vector<std::pair<std::string, double>> read_report_kv(const std::filesystem::path& path);

}  // namespace semdvc
