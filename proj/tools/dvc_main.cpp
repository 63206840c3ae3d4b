// dvc: run pipeline stages and the vocabulary/window sweep.
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "semdvc/error.hpp"
#include "semdvc/eval.hpp"
#include "semdvc/pipeline.hpp"

namespace {

semdvc::PipelineConfig configure(const std::string& path, const std::optional<std::uint64_t>& seed,
                                 const std::string& out) {
  semdvc::PipelineConfig cfg = semdvc::load_pipeline_config(path);
  if (seed) cfg.seed = *seed;
  if (!out.empty()) cfg.out_dir = out;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dense video captioning with codebook co-occurrence descriptors"};
  app.require_subcommand(1);

  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::size_t> vocab;
  std::vector<std::size_t> window;

  std::vector<std::string> stages = semdvc::stage_names();
  stages.push_back("ingest");
  stages.push_back("all");
  for (const auto& name : stages) {
    auto* sub = app.add_subcommand(name, name == "all" ? "run every stage in order" : "run the " + name + " stage");
    sub->add_option("--config", config, "pipeline config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "override the config seed");
    sub->add_option("--out", out, "override the output directory");
  }
  auto* sw = app.add_subcommand("sweep", "retrain codebook..eval for each (|C|, S) pair");
  sw->add_option("--config", config, "pipeline config (JSON)")->required()->check(CLI::ExistingFile);
  sw->add_option("--seed", seed, "override the config seed");
  sw->add_option("--out", out, "override the output directory");
  sw->add_option("--vocab", vocab, "codebook sizes")->required()->delimiter(',');
  sw->add_option("--window", window, "co-occurrence windows")->required()->delimiter(',');

  CLI11_PARSE(app, argc, argv);

  try {
    const auto* chosen = app.get_subcommands().front();
    const semdvc::PipelineConfig cfg = configure(config, seed, out);
    if (chosen->get_name() == "sweep") {
      const auto rows = semdvc::sweep(cfg, vocab, window);
      std::cout << semdvc::format_sweep_table(rows);
    } else if (chosen->get_name() == "all") {
      semdvc::run_all(cfg);
    } else {
      semdvc::run_stage(chosen->get_name(), cfg);
      if (chosen->get_name() == "eval") {
        std::cout << semdvc::format_report_table(semdvc::read_report_kv(semdvc::stage_dir(cfg, "eval") / "report.kv"));
      }
    }
  } catch (const semdvc::Error& e) {
    std::fprintf(stderr, "dvc: %s error: %s\n", semdvc::to_string(e.kind()), e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "dvc: %s\n", e.what());
    return 1;
  }
  return 0;
}
