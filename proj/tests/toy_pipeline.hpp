// Small pipeline configuration and artifact fingerprints shared by tests.
#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "semdvc/pipeline.hpp"

inline semdvc::PipelineConfig toy_pipeline(const std::filesystem::path& out) {
  semdvc::PipelineConfig c = semdvc::parse_pipeline_config(R"({
    "seed": 3,
    "synth": {"num_videos": 12, "clips_per_video": [10, 14], "num_topics": 2, "clusters_per_topic": 4,
              "feature_dim": 6, "events_per_video": [2, 3]},
    "codebook": {"k": 8, "epochs": 3, "batch_size": 64},
    "embed": {"d_emb": 4, "max_iters": 60},
    "transformer": {"d_model": 16, "num_heads": 2, "num_layers": 1, "d_ffn": 24, "max_len": 12},
    "captioner": {"epochs": 3, "lr": 0.001, "batch_size": 8, "decode_max_len": 12},
    "proposals": {"num_anchors": 4, "kernel_sizes": [3], "hidden": 8, "epochs": 3, "lr": 0.001,
                  "num_proposals": 6},
    "caption": {"top": 6}
  })");
  c.out_dir = out;
  return c;
}

// Relative path -> SHA-256 of every file under dir.
inline std::map<std::string, std::string> tree_hashes(const std::filesystem::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out[std::filesystem::relative(e.path(), dir).generic_string()] = semdvc::sha256_hex(e.path());
  }
  return out;
}
