// popcluster: discovery-based clustering of trial-by-feature matrices.
// PCA reduction, GMM fitting with BIC model-order selection, stability
// analysis, cluster-interpretation metrics, and PCA diagnostics, driven by a
// flat key=value config. See README.md and docs/FORMATS.md.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "popcluster/popcluster.hpp"

namespace {

using namespace popcluster;
namespace fs = std::filesystem;

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitCompute = 3;

struct CommonOpts {
  std::string config_path;
  std::string output_dir;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "run config file (key = value)")->required();
  cmd->add_option("--output-dir", opts.output_dir, "overrides output_dir from the config");
  cmd->add_option("--seed", opts.seed, "overrides seed from the config");
}

config::RunConfig load_config(const CommonOpts& opts) {
  auto cfg = config::load_run_config_file(opts.config_path);
  if (!opts.output_dir.empty()) cfg.output_dir = opts.output_dir;
  if (opts.seed) cfg.seed = *opts.seed;
  if (cfg.output_dir.empty())
    throw ValidationError("output_dir must be set in the config or via --output-dir");
  return cfg;
}

int run_guarded(const std::function<void()>& body) {
  try {
    body();
    return kExitOk;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitCompute;
  }
}

void cmd_synth(const synth::SynthSpec& spec, const std::string& output_dir) {
  const auto data = synth::generate(spec);
  fs::create_directories(output_dir);
  const fs::path out(output_dir);

  dataset::save_matrix_binary(data.x, (out / "synth.pcm1").string());

  csv::Writer labels((out / "truth_labels.csv").string(), {"trial_id", "label"});
  for (std::size_t i = 0; i < data.true_labels.size(); ++i)
    labels.row({data.x.trial_ids[i], std::to_string(data.true_labels[i])});

  // Config-grammar echo of the realized spec.
  std::ofstream echo(out / "synth_spec.txt");
  echo << "synth.k_true = " << spec.k_true << "\n"
       << "synth.n = " << spec.n << "\n"
       << "synth.d_low = " << spec.d_low << "\n"
       << "synth.m = " << spec.m << "\n"
       << "synth.separation = " << format_double(spec.separation) << "\n"
       << "synth.within_sd = " << format_double(spec.within_sd) << "\n"
       << "synth.noise_sd = " << format_double(spec.noise_sd) << "\n"
       << "synth.seed = " << spec.seed << "\n";
  if (!spec.weights.empty()) {
    echo << "synth.weights = ";
    for (std::size_t i = 0; i < spec.weights.size(); ++i)
      echo << (i ? "," : "") << format_double(spec.weights[i]);
    echo << "\n";
  }
  std::cout << "wrote " << (out / "synth.pcm1").string() << " (" << spec.n << "x" << spec.m
            << "), truth_labels.csv, synth_spec.txt\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"popcluster: discovery-based clustering pipeline"};
  app.require_subcommand(1);

  CommonOpts pipeline_opts, sweep_opts, fit_opts, stability_opts, interpret_opts, diagnose_opts;

  auto* pipeline_cmd = app.add_subcommand("pipeline", "run every stage and write report.json");
  add_common(pipeline_cmd, pipeline_opts);
  auto* sweep_cmd = app.add_subcommand("sweep", "PCA + BIC sweep for every subject");
  add_common(sweep_cmd, sweep_opts);
  auto* fit_cmd = app.add_subcommand("fit", "final GMM fit at each subject's chosen K");
  add_common(fit_cmd, fit_opts);
  auto* stability_cmd =
      app.add_subcommand("stability", "Rand-index stability across re-initializations");
  add_common(stability_cmd, stability_opts);
  auto* interpret_cmd =
      app.add_subcommand("interpret", "overlap, NMI, cosine, and label distributions");
  add_common(interpret_cmd, interpret_opts);
  auto* diagnose_cmd = app.add_subcommand("diagnose", "PCA diagnostics per subject");
  add_common(diagnose_cmd, diagnose_opts);

  synth::SynthSpec spec;
  std::string synth_out;
  std::string synth_weights;
  auto* synth_cmd = app.add_subcommand("synth", "generate planted-cluster validation data");
  synth_cmd->add_option("--k", spec.k_true, "planted cluster count");
  synth_cmd->add_option("--n", spec.n, "trials");
  synth_cmd->add_option("--d-low", spec.d_low, "latent dimension");
  synth_cmd->add_option("--m", spec.m, "ambient feature count");
  synth_cmd->add_option("--separation", spec.separation,
                        "min pairwise mean distance in within-cluster SDs");
  synth_cmd->add_option("--within-sd", spec.within_sd, "within-cluster SD");
  synth_cmd->add_option("--noise-sd", spec.noise_sd, "ambient noise SD");
  synth_cmd->add_option("--weights", synth_weights, "comma-separated cluster weights");
  synth_cmd->add_option("--seed", spec.seed, "generator seed")->required();
  synth_cmd->add_option("--output-dir", synth_out, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  if (pipeline_cmd->parsed())
    return run_guarded([&] {
      const auto cfg = load_config(pipeline_opts);
      pipeline::cmd_pipeline(cfg);
      std::cout << "report: " << (fs::path(cfg.output_dir) / "report.json").string() << "\n";
    });
  if (sweep_cmd->parsed())
    return run_guarded([&] {
      const auto cfg = load_config(sweep_opts);
      pipeline::Layout layout(cfg.output_dir);
      fs::create_directories(layout.out);
      pipeline::run_pca_stage(cfg, layout);
      pipeline::run_sweep_stage(cfg, layout);
    });
  if (fit_cmd->parsed())
    return run_guarded([&] {
      const auto cfg = load_config(fit_opts);
      pipeline::run_fit_stage(cfg, pipeline::Layout(cfg.output_dir));
    });
  if (stability_cmd->parsed())
    return run_guarded([&] {
      const auto cfg = load_config(stability_opts);
      pipeline::run_stability_stage(cfg, pipeline::Layout(cfg.output_dir));
    });
  if (interpret_cmd->parsed())
    return run_guarded([&] {
      const auto cfg = load_config(interpret_opts);
      pipeline::run_interpret_stage(cfg, pipeline::Layout(cfg.output_dir));
    });
  if (diagnose_cmd->parsed())
    return run_guarded([&] {
      auto cfg = load_config(diagnose_opts);
      cfg.diagnostics_enabled = true;
      pipeline::run_diagnostics_stage(cfg, pipeline::Layout(cfg.output_dir));
    });
  if (synth_cmd->parsed())
    return run_guarded([&] {
      if (!synth_weights.empty()) {
        std::istringstream in(synth_weights);
        std::string item;
        while (std::getline(in, item, ',')) spec.weights.push_back(std::stod(item));
      }
      cmd_synth(spec, synth_out);
    });
  return kExitValidation;
}
