// Command-line front end: dataset generation and checking, training,
// evaluation, paired protocol comparison and report summaries.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "evofa/checkpoint.hpp"
#include "evofa/config_io.hpp"
#include "evofa/feature_io.hpp"
#include "evofa/harness.hpp"
#include "evofa/synthetic.hpp"

namespace fs = std::filesystem;
using namespace evofa;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

void log(const std::string& msg) { std::cerr << "[evofa] " << msg << '\n'; }

std::string command_line(int argc, char** argv) {
  std::string out;
  for (int i = 0; i < argc; ++i) out += (i ? " " : "") + std::string(argv[i]);
  return out;
}

// --- synth-gen --------------------------------------------------------------

int cmd_synth_gen(const std::string& config_path, const fs::path& out, const std::string& cmdline) {
  const DriftConfig cfg = drift_config_from_json(read_json_file(config_path));
  const bool fresh = !fs::exists(out);
  try {
    const DatasetIndex ds = generate_synthetic_drift(cfg);
    export_features(ds, out);
    OutputTree tree(out);
    tree.write_json("run-manifest.json", run_manifest(cmdline, to_json(cfg), cfg.rng_seed));
    std::cout << "wrote " << ds.samples.size() << " samples to " << (out / "manifest.json").string() << '\n';
  } catch (...) {
    if (fresh) fs::remove_all(out);
    throw;
  }
  return 0;
}

// --- import-check ------------------------------------------------------------

int cmd_import_check(const std::string& manifest) {
  const DatasetIndex ds = import_features(manifest);
  std::cout << "samples: " << ds.samples.size() << '\n'
            << "schema: " << ds.schema.electrodes << " x " << ds.schema.bands << '\n'
            << "classes: " << ds.num_classes << '\n'
            << "subjects: " << ds.subjects().size() << '\n';
  for (int s : ds.subjects()) {
    std::cout << "  subject " << s << " sessions:";
    for (int sess : ds.sessions_of(s)) std::cout << ' ' << sess;
    std::cout << '\n';
  }
  return 0;
}

// --- train / compare -----------------------------------------------------------

RunHooks artifact_hooks(OutputTree& tree) {
  RunHooks hooks;
  hooks.on_trained = [&tree](const Cell& cell, const std::string& method, const TrainResult& r, const Json& meta) {
    const std::string stem = cell.label() + (method == kMethodSupervised ? "_supervised" : "_fsl");
    tree.write(fs::path("checkpoints") / (stem + ".ckpt"), serialize_checkpoint(r.model, meta));
    tree.write(fs::path("logs") / (stem + ".csv"), training_log_csv(r));
  };
  hooks.on_progress = log;
  return hooks;
}

ExperimentConfig experiment_with_output(const std::string& config_path, const std::string& out_override) {
  ExperimentConfig cfg = load_experiment_config(config_path);
  if (!out_override.empty()) cfg.output = out_override;
  return cfg;
}

int cmd_train(const ExperimentConfig& cfg, const std::string& cmdline) {
  OutputTree tree(cfg.output);
  try {
    const DatasetIndex ds = load_dataset(cfg.dataset);
    cfg.validate_against(ds);
    const RunHooks hooks = artifact_hooks(tree);
    for (const Cell& cell : protocol_cells(cfg, ds)) {
      log("training " + cell.label());
      try {
        train_cell(cfg, ds, cell, hooks);
      } catch (const Error&) {
        rethrow_with_context("subject " + std::to_string(cell.subject) + ", session " +
                             std::to_string(cell.session) + ": ");
      }
    }
    tree.write_json("run-manifest.json", run_manifest(cmdline, to_json(cfg), cfg.seed));
  } catch (...) {
    tree.rollback();
    throw;
  }
  std::cout << "wrote " << tree.files().size() << " files under " << tree.root().string() << '\n';
  return 0;
}

void write_results(OutputTree& tree, const ResultTable& table) {
  tree.write("results.csv", table.to_csv());
  tree.write_json("results.json", table.to_json());
}

int cmd_compare(const ExperimentConfig& cfg, const std::string& cmdline) {
  OutputTree tree(cfg.output);
  try {
    const DatasetIndex ds = load_dataset(cfg.dataset);
    const ResultTable table = run_protocol(cfg, ds, artifact_hooks(tree));
    write_results(tree, table);
    tree.write_json("run-manifest.json", run_manifest(cmdline, to_json(cfg), cfg.seed));
    std::cout << table.to_csv();
  } catch (...) {
    tree.rollback();
    throw;
  }
  return 0;
}

// --- evaluate -----------------------------------------------------------------

struct EvaluateOptions {
  std::string checkpoint;
  std::string adapt = "on";
  std::vector<std::size_t> shots;
  std::size_t episodes = 0;
  bool export_embeddings = false;
  bool persist_adaptation = false;
  std::string out = "evaluation";
};

int cmd_evaluate(const EvaluateOptions& opt, const std::string& cmdline) {
  Checkpoint ck = load_checkpoint(opt.checkpoint);
  if (!ck.meta.contains("experiment")) throw ConfigError(opt.checkpoint + ": checkpoint carries no experiment metadata");
  const ExperimentConfig cfg = experiment_config_from_json(ck.meta.at("experiment"));
  const int subject = ck.meta.at("subject").get<int>();
  const int session = ck.meta.at("session").get<int>();
  const std::string method = ck.meta.at("method").get<std::string>();

  OutputTree tree(opt.out);
  try {
    const DatasetIndex ds = load_dataset(cfg.dataset);
    cfg.validate_against(ds);
    const Cell cell = make_cell(cfg, ds, session, subject);
    const Pool test_pool = cell.split.test_pool(ds);
    const Pool train_pool = cell.split.train_pool(ds);

    ResultTable table;
    if (method == kMethodSupervised) {
      Stopwatch sw;
      table.rows.push_back(supervised_row(cell, ck.model, test_pool, sw.seconds()));
    } else {
      EvalConfig eval = cell_eval_config(cfg, cell);
      if (opt.episodes) eval.episodes = opt.episodes;
      eval.persist_adaptation = opt.persist_adaptation;
      const std::vector<std::size_t> shots = opt.shots.empty() ? std::vector<std::size_t>{eval.k_shot} : opt.shots;
      table = shot_sweep(ck.model, cell, test_pool, train_pool, eval, cfg.adapt, shots, opt.adapt == "on");
    }
    write_results(tree, table);
    if (opt.export_embeddings) {
      tree.write(fs::path("embeddings") / (fs::path(opt.checkpoint).stem().string() + ".csv"),
                 export_embeddings_csv(ck.model, test_pool));
    }
    Json config = {{"checkpoint", opt.checkpoint},
                   {"adapt", opt.adapt},
                   {"shots", opt.shots},
                   {"episodes", opt.episodes},
                   {"persist_adaptation", opt.persist_adaptation},
                   {"experiment", to_json(cfg)}};
    tree.write_json("run-manifest.json", run_manifest(cmdline, config, cfg.seed));
    std::cout << table.to_csv();
  } catch (...) {
    tree.rollback();
    throw;
  }
  return 0;
}

// --- report ---------------------------------------------------------------------

/// Aggregate rows with the adapted-minus-baseline gain per (session, shots).
std::string summary_csv(const ResultTable& table) {
  std::map<std::pair<std::string, std::size_t>, double> fsl;
  for (const auto& r : table.rows)
    if (r.is_aggregate() && r.method == kMethodFsl) fsl[{r.session, r.shots}] = r.mean_acc;
  std::ostringstream os;
  os << "protocol,session,method,shots,mean_acc,std_acc,std_kind,gain_vs_fsl\n";
  for (const auto& r : table.rows) {
    if (!r.is_aggregate()) continue;
    os << r.protocol << ',' << r.session << ',' << r.method << ',' << r.shots << ',' << format_double(r.mean_acc) << ','
       << format_double(r.std_acc) << ',' << r.std_kind << ',';
    auto it = fsl.find({r.session, r.shots});
    if (r.method == kMethodEvofa && it != fsl.end()) os << format_double(r.mean_acc - it->second);
    os << '\n';
  }
  return os.str();
}

int cmd_report(const std::string& results, const std::string& out) {
  ResultTable table = parse_results_csv(io::read_file(results));
  if (std::none_of(table.rows.begin(), table.rows.end(), [](const ResultRow& r) { return r.is_aggregate(); })) {
    table.add_aggregates();
  }
  const std::string summary = summary_csv(table);
  for (const auto& r : table.rows) {
    if (!r.is_aggregate()) continue;
    char line[160];
    std::snprintf(line, sizeof line, "%-6s session %-4s %-11s %2zu-shot  %6.2f%% +- %5.2f (%s)\n", r.protocol.c_str(),
                  r.session.c_str(), r.method.c_str(), r.shots, 100.0 * r.mean_acc, 100.0 * r.std_acc,
                  r.std_kind.c_str());
    std::cout << line;
  }
  if (!out.empty()) {
    OutputTree tree(fs::path(out).parent_path());
    tree.write(fs::path(out).filename(), summary);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"EvoFA few-shot learning and test-time adaptation laboratory"};
  app.require_subcommand(1);
  const std::string cmdline = command_line(argc, argv);

  std::string config, out, manifest, results;

  auto* synth = app.add_subcommand("synth-gen", "Generate a synthetic drift dataset");
  synth->add_option("--config", config, "Drift generator config (JSON)")->required()->check(CLI::ExistingFile);
  synth->add_option("--out", out, "Output dataset directory")->required();

  auto* check = app.add_subcommand("import-check", "Validate and summarize a feature manifest");
  check->add_option("--manifest", manifest, "Manifest JSON")->required();

  std::string train_out;
  auto* train = app.add_subcommand("train", "Train FSL (and supervised) models for every protocol cell");
  train->add_option("--config", config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  train->add_option("--out", train_out, "Output directory (overrides config)");

  EvaluateOptions eval_opt;
  std::string shots_text;
  auto* evaluate = app.add_subcommand("evaluate", "Evaluate a checkpoint on its protocol cell");
  evaluate->add_option("--checkpoint", eval_opt.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--adapt", eval_opt.adapt, "Test-time adaptation")->check(CLI::IsMember({"on", "off"}));
  evaluate->add_option("--shots", eval_opt.shots, "Support sizes to sweep, e.g. 1,3,5")->delimiter(',');
  evaluate->add_option("--episodes", eval_opt.episodes, "Override the episode count");
  evaluate->add_flag("--export-embeddings", eval_opt.export_embeddings, "Write test-pool embeddings CSV");
  evaluate->add_flag("--persist-adaptation", eval_opt.persist_adaptation, "Carry the adapter across episodes");
  evaluate->add_option("--out", eval_opt.out, "Output directory");

  std::string compare_out;
  auto* compare = app.add_subcommand("compare", "Run the protocol: supervised vs FSL vs FSL+EvoFA");
  compare->add_option("--config", config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  compare->add_option("--out", compare_out, "Output directory (overrides config)");

  std::string summary_out;
  auto* report = app.add_subcommand("report", "Summarize a results CSV");
  report->add_option("--results", results, "results.csv from compare or evaluate")->required()->check(CLI::ExistingFile);
  report->add_option("--out", summary_out, "Write the summary CSV here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    const CLI::App* failing = &app;
    for (auto* sub : app.get_subcommands()) failing = sub;
    std::cerr << failing->help();
    return kExitUsage;
  }

  try {
    if (*synth) return cmd_synth_gen(config, out, cmdline);
    if (*check) return cmd_import_check(manifest);
    if (*train) return cmd_train(experiment_with_output(config, train_out), cmdline);
    if (*evaluate) return cmd_evaluate(eval_opt, cmdline);
    if (*compare) return cmd_compare(experiment_with_output(config, compare_out), cmdline);
    if (*report) return cmd_report(results, summary_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitFailure;
}
