#pragma once

// Experiment orchestration: configuration, intra/inter protocols with paired
// baseline vs adapted evaluation, result tables, shot sweeps, embedding
// export and output-tree management.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "evofa/adaptation.hpp"
#include "evofa/binary_io.hpp"
#include "evofa/checkpoint.hpp"
#include "evofa/config_io.hpp"
#include "evofa/feature_io.hpp"
#include "evofa/fsl.hpp"
#include "evofa/synthetic.hpp"

#ifndef EVOFA_VERSION
#define EVOFA_VERSION "unknown"
#endif

namespace evofa {

inline const char* version_string() { return EVOFA_VERSION; }

inline SplitKind split_kind_from_string(const std::string& s) {
  if (s == "intra") return SplitKind::intra;
  if (s == "inter") return SplitKind::inter;
  throw ConfigError("unknown protocol '" + s + "' (expected intra or inter)");
}

// ---------------------------------------------------------------------------
// Configuration

struct DatasetSource {
  std::optional<DriftConfig> synthetic;
  std::string manifest;  // used when `synthetic` is empty
};

struct ExperimentConfig {
  DatasetSource dataset{DriftConfig{}, {}};
  SplitKind protocol = SplitKind::intra;
  BackboneConfig backbone;
  TrainConfig train;
  AdaptConfig adapt;
  EvalConfig eval;
  std::vector<int> subjects;  // test subjects; empty = all
  std::vector<int> sessions;  // inter protocol sessions; empty = all
  bool supervised_baseline = true;
  std::uint64_t seed = 1;
  std::string output = "run";

  void validate() const {
    backbone.validate();
    train.validate();
    adapt.validate();
    if (backbone.head_kind == HeadKind::linear) throw ConfigError("experiment: head_kind must be an episodic head");
    if (!dataset.synthetic && dataset.manifest.empty()) throw ConfigError("experiment: dataset source missing");
    if (!eval.n_way || !eval.k_shot || !eval.q_query || !eval.episodes) {
      throw ConfigError("experiment: eval N, K, Q and episodes must be >= 1");
    }
  }

  /// Checks the parts of the config that depend on the dataset.
  void validate_against(const DatasetIndex& ds) const {
    validate();
    if (backbone.n_electrodes != ds.schema.electrodes || backbone.d_bands != ds.schema.bands) {
      throw ConfigError("experiment: backbone expects " + std::to_string(backbone.n_electrodes) + "x" +
                        std::to_string(backbone.d_bands) + " features, dataset has " +
                        std::to_string(ds.schema.electrodes) + "x" + std::to_string(ds.schema.bands));
    }
    if (backbone.num_classes != ds.num_classes) {
      throw ConfigError("experiment: backbone.num_classes " + std::to_string(backbone.num_classes) +
                        " differs from dataset class count " + std::to_string(ds.num_classes));
    }
    if (eval.n_way > ds.num_classes || train.n_way > ds.num_classes) {
      throw ConfigError("experiment: N exceeds the dataset class count " + std::to_string(ds.num_classes));
    }
  }
};

inline Json to_json(const ExperimentConfig& c) {
  Json dataset;
  if (c.dataset.synthetic) {
    dataset["synthetic"] = to_json(*c.dataset.synthetic);
  } else {
    dataset["manifest"] = c.dataset.manifest;
  }
  return {{"dataset", dataset},
          {"protocol", to_string(c.protocol)},
          {"backbone", to_json(c.backbone)},
          {"train", to_json(c.train)},
          {"adapt", to_json(c.adapt)},
          {"eval", to_json(c.eval)},
          {"subjects", c.subjects},
          {"sessions", c.sessions},
          {"supervised_baseline", c.supervised_baseline},
          {"seed", c.seed},
          {"output", c.output}};
}

/// Parses an experiment config. A top-level "head_kind" overrides the
/// backbone's head.
inline ExperimentConfig experiment_config_from_json(const Json& j) {
  ExperimentConfig c;
  detail::FieldReader r(j, "experiment");
  if (const Json* d = r.sub("dataset")) {
    detail::FieldReader dr(*d, "experiment.dataset");
    const Json* synth = dr.sub("synthetic");
    std::string manifest;
    dr.get("manifest", manifest);
    dr.finish();
    if (synth && !manifest.empty()) throw ConfigError("experiment.dataset: give either synthetic or manifest");
    if (synth) {
      c.dataset = {drift_config_from_json(*synth, "experiment.dataset.synthetic"), {}};
    } else if (!manifest.empty()) {
      c.dataset = {std::nullopt, manifest};
    }
  }
  std::string protocol = to_string(c.protocol);
  r.get("protocol", protocol);
  c.protocol = split_kind_from_string(protocol);
  if (const Json* b = r.sub("backbone")) c.backbone = backbone_config_from_json(*b, "experiment.backbone", false);
  std::string head;
  r.get("head_kind", head);
  if (!head.empty()) c.backbone.head_kind = head_kind_from_string(head);
  if (const Json* t = r.sub("train")) c.train = train_config_from_json(*t, "experiment.train");
  if (const Json* a = r.sub("adapt")) c.adapt = adapt_config_from_json(*a, "experiment.adapt");
  if (const Json* e = r.sub("eval")) c.eval = eval_config_from_json(*e, "experiment.eval");
  r.get("subjects", c.subjects);
  r.get("sessions", c.sessions);
  r.get("supervised_baseline", c.supervised_baseline);
  r.get("seed", c.seed);
  r.get("output", c.output);
  r.finish();
  c.validate();
  return c;
}

inline Json read_json_file(const std::filesystem::path& path) {
  const std::string text = io::read_file(path);
  try {
    return Json::parse(text);
  } catch (const Json::exception& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
}

/// Loads an experiment config; a relative manifest path is resolved against
/// the config file's directory.
inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  ExperimentConfig cfg = experiment_config_from_json(read_json_file(path));
  if (!cfg.dataset.synthetic && std::filesystem::path(cfg.dataset.manifest).is_relative()) {
    cfg.dataset.manifest = (path.parent_path() / cfg.dataset.manifest).lexically_normal().string();
  }
  return cfg;
}

inline DatasetIndex load_dataset(const DatasetSource& source) {
  if (source.synthetic) return generate_synthetic_drift(*source.synthetic);
  return import_features(source.manifest);
}

// ---------------------------------------------------------------------------
// Protocol cells

/// One train/evaluate unit: a test subject (and session for inter).
struct Cell {
  SplitKind protocol = SplitKind::intra;
  int subject = 0;
  int session = 0;
  std::uint64_t seed = 0;
  SplitSpec split;

  std::string label() const {
    return std::string(to_string(protocol)) + "_sess" + std::to_string(session) + "_subj" + std::to_string(subject);
  }
};

inline std::uint64_t cell_seed(std::uint64_t master, int session, int subject) {
  return derive_seed(derive_seed(master, static_cast<std::uint64_t>(session)), static_cast<std::uint64_t>(subject));
}

inline Cell make_cell(const ExperimentConfig& cfg, const DatasetIndex& ds, int session, int subject) {
  Cell cell;
  cell.protocol = cfg.protocol;
  cell.subject = subject;
  cell.seed = cell_seed(cfg.seed, cfg.protocol == SplitKind::intra ? 0 : session, subject);
  if (cfg.protocol == SplitKind::intra) {
    cell.split = make_intra_split(ds, subject);
  } else {
    Rng rng = make_rng(cell.seed, 0x5B17);
    cell.split = make_inter_split(ds, session, subject, rng);
  }
  cell.session = cell.split.session;
  return cell;
}

/// Cells in report order: intra by subject; inter by session then subject.
inline std::vector<Cell> protocol_cells(const ExperimentConfig& cfg, const DatasetIndex& ds) {
  const std::vector<int> subjects = cfg.subjects.empty() ? ds.subjects() : cfg.subjects;
  std::vector<Cell> cells;
  if (cfg.protocol == SplitKind::intra) {
    for (int s : subjects) cells.push_back(make_cell(cfg, ds, 3, s));
    return cells;
  }
  std::vector<int> sessions = cfg.sessions;
  if (sessions.empty()) {
    std::set<int> all;
    for (int s : ds.subjects())
      for (int sess : ds.sessions_of(s)) all.insert(sess);
    sessions.assign(all.begin(), all.end());
  }
  for (int sess : sessions)
    for (int s : subjects) cells.push_back(make_cell(cfg, ds, sess, s));
  return cells;
}

inline TrainConfig cell_train_config(const ExperimentConfig& cfg, const Cell& cell) {
  TrainConfig t = cfg.train;
  t.rng_seed = derive_seed(cell.seed, 1);
  return t;
}

inline BackboneConfig cell_backbone(const ExperimentConfig& cfg, const Cell& cell, HeadKind head) {
  BackboneConfig b = cfg.backbone;
  b.head_kind = head;
  b.init_seed = derive_seed(cell.seed, 2);
  return b;
}

inline EvalConfig cell_eval_config(const ExperimentConfig& cfg, const Cell& cell) {
  EvalConfig e = cfg.eval;
  e.seed = derive_seed(cell.seed, 3);
  return e;
}

inline Json cell_meta(const ExperimentConfig& cfg, const Cell& cell, const std::string& method,
                      const TrainResult& trained) {
  return {{"experiment", to_json(cfg)},
          {"protocol", to_string(cell.protocol)},
          {"subject", cell.subject},
          {"session", cell.session},
          {"method", method},
          {"best_epoch", trained.best_epoch},
          {"best_val_accuracy", trained.best_val_accuracy}};
}

// ---------------------------------------------------------------------------
// Result tables

inline constexpr const char* kMethodSupervised = "supervised";
inline constexpr const char* kMethodFsl = "FSL";
inline constexpr const char* kMethodEvofa = "FSL+EvoFA";

struct ResultRow {
  std::string protocol;
  std::string session;
  std::string subject;  // "ALL" on aggregate rows
  std::string method;
  std::size_t shots = 0;     // 0 for the supervised baseline
  std::size_t episodes = 0;  // 0 for the supervised baseline
  double mean_acc = 0.0;
  double std_acc = 0.0;
  std::string std_kind;      // episodes | subjects | none
  double wall_seconds = 0.0;           // JSON only
  std::uint64_t episode_digest = 0;    // JSON only; CRC over per-episode digests

  bool is_aggregate() const { return subject == "ALL"; }
};

inline constexpr const char* kResultColumns =
    "protocol,session,subject,method,shots,episodes,mean_acc,std_acc,std_kind";

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct ResultTable {
  std::vector<ResultRow> rows;

  /// Appends per-method aggregate rows: mean of the subject rows and their
  /// sample standard deviation. Inter runs also get per-session aggregates.
  void add_aggregates() {
    std::vector<ResultRow> base;
    for (const auto& r : rows)
      if (!r.is_aggregate()) base.push_back(r);
    std::vector<std::pair<std::string, std::string>> keys;  // (session filter, method), first-seen order
    auto remember = [&](const std::string& session, const std::string& method) {
      if (std::find(keys.begin(), keys.end(), std::make_pair(session, method)) == keys.end())
        keys.emplace_back(session, method);
    };
    std::set<std::string> sessions;
    for (const auto& r : base) sessions.insert(r.session);
    const bool per_session = !base.empty() && base.front().protocol == "inter" && sessions.size() > 1;
    if (per_session)
      for (const auto& r : base) remember(r.session, r.method);
    for (const auto& r : base) remember("ALL", r.method);

    for (const auto& [session, method] : keys) {
      std::vector<const ResultRow*> members;
      for (const auto& r : base)
        if (r.method == method && (session == "ALL" || r.session == session)) members.push_back(&r);
      ResultRow agg = *members.front();
      const bool one_session = std::all_of(members.begin(), members.end(),
                                           [&](const ResultRow* m) { return m->session == agg.session; });
      if (!one_session) agg.session = "ALL";
      agg.subject = "ALL";
      agg.std_kind = "subjects";
      agg.episodes = 0;
      agg.wall_seconds = 0.0;
      agg.episode_digest = 0;
      double s = 0.0;
      for (const auto* m : members) {
        s += m->mean_acc;
        agg.episodes += m->episodes;
        agg.wall_seconds += m->wall_seconds;
      }
      const auto n = static_cast<double>(members.size());
      agg.mean_acc = s / n;
      double v = 0.0;
      for (const auto* m : members) v += (m->mean_acc - agg.mean_acc) * (m->mean_acc - agg.mean_acc);
      agg.std_acc = members.size() > 1 ? std::sqrt(v / (n - 1)) : 0.0;
      rows.push_back(agg);
    }
  }

  std::string to_csv() const {
    std::ostringstream os;
    os << kResultColumns << '\n';
    for (const auto& r : rows) {
      os << r.protocol << ',' << r.session << ',' << r.subject << ',' << r.method << ',' << r.shots << ','
         << r.episodes << ',' << format_double(r.mean_acc) << ',' << format_double(r.std_acc) << ',' << r.std_kind
         << '\n';
    }
    return os.str();
  }

  Json to_json() const {
    Json arr = Json::array();
    for (const auto& r : rows) {
      arr.push_back({{"protocol", r.protocol},
                     {"session", r.session},
                     {"subject", r.subject},
                     {"method", r.method},
                     {"shots", r.shots},
                     {"episodes", r.episodes},
                     {"mean_acc", r.mean_acc},
                     {"std_acc", r.std_acc},
                     {"std_kind", r.std_kind},
                     {"wall_seconds", r.wall_seconds},
                     {"episode_digest", r.episode_digest}});
    }
    return {{"columns", kResultColumns}, {"rows", arr}};
  }
};

inline ResultTable parse_results_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kResultColumns) throw SchemaError("results CSV: unexpected header");
  ResultTable table;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (f.size() != 9) throw SchemaError("results CSV line " + std::to_string(lineno) + ": expected 9 fields");
    try {
      ResultRow r;
      r.protocol = f[0];
      r.session = f[1];
      r.subject = f[2];
      r.method = f[3];
      r.shots = std::stoul(f[4]);
      r.episodes = std::stoul(f[5]);
      r.mean_acc = std::stod(f[6]);
      r.std_acc = std::stod(f[7]);
      r.std_kind = f[8];
      table.rows.push_back(r);
    } catch (const std::exception&) {
      throw SchemaError("results CSV line " + std::to_string(lineno) + ": malformed number");
    }
  }
  return table;
}

inline std::uint64_t digest_of(const std::vector<std::uint64_t>& digests) {
  Crc64 crc;
  for (auto d : digests) crc.process_bytes(&d, sizeof d);
  return crc.checksum();
}

inline ResultRow episode_row(const Cell& cell, const std::string& method, const EvalConfig& eval,
                             const EvalReport& report, double seconds) {
  ResultRow r;
  r.protocol = to_string(cell.protocol);
  r.session = std::to_string(cell.session);
  r.subject = std::to_string(cell.subject);
  r.method = method;
  r.shots = eval.k_shot;
  r.episodes = report.accuracies.size();
  r.mean_acc = report.mean;
  r.std_acc = report.std;
  r.std_kind = "episodes";
  r.wall_seconds = seconds;
  r.episode_digest = digest_of(report.digests);
  return r;
}

// ---------------------------------------------------------------------------
// Running

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

struct PairedEvaluation {
  EvalReport baseline;
  EvalReport adapted;
  double baseline_seconds = 0.0;
  double adapted_seconds = 0.0;
};

/// Baseline and adapted evaluation over the identical episode stream.
inline PairedEvaluation evaluate_paired(const Model& model, const Pool& test_pool, const Pool& train_pool,
                                        SplitKind kind, EvalConfig eval, const AdaptConfig& adapt_cfg) {
  PairedEvaluation out;
  Stopwatch t0;
  eval.adapt = false;
  out.baseline = evofa_test(model, test_pool, train_pool, kind, eval, adapt_cfg);
  out.baseline_seconds = t0.seconds();
  Stopwatch t1;
  eval.adapt = true;
  out.adapted = evofa_test(model, test_pool, train_pool, kind, eval, adapt_cfg);
  out.adapted_seconds = t1.seconds();
  if (out.baseline.digests != out.adapted.digests) {
    throw ContractError("paired evaluation consumed different episode streams");
  }
  return out;
}

/// Observer for artifacts produced while a protocol runs.
struct RunHooks {
  std::function<void(const Cell&, const std::string& method, const TrainResult&, const Json& meta)> on_trained;
  std::function<void(const std::string&)> on_progress;
};

struct CellModels {
  TrainResult fsl;
  std::optional<TrainResult> supervised;
};

inline CellModels train_cell(const ExperimentConfig& cfg, const DatasetIndex& ds, const Cell& cell,
                             const RunHooks& hooks = {}) {
  const Pool train_pool = cell.split.train_pool(ds);
  const Pool val_pool = cell.split.val_pool(ds);
  const TrainConfig tcfg = cell_train_config(cfg, cell);
  CellModels out;
  out.fsl = meta_train(make_model(cell_backbone(cfg, cell, cfg.backbone.head_kind)), train_pool, val_pool, tcfg);
  if (hooks.on_trained) hooks.on_trained(cell, kMethodFsl, out.fsl, cell_meta(cfg, cell, kMethodFsl, out.fsl));
  if (cfg.supervised_baseline) {
    out.supervised =
        train_supervised_baseline(make_model(cell_backbone(cfg, cell, HeadKind::linear)), train_pool, val_pool, tcfg);
    if (hooks.on_trained) {
      hooks.on_trained(cell, kMethodSupervised, *out.supervised,
                       cell_meta(cfg, cell, kMethodSupervised, *out.supervised));
    }
  }
  return out;
}

inline ResultRow supervised_row(const Cell& cell, Model& model, const Pool& test_pool, double seconds) {
  ResultRow r;
  r.protocol = to_string(cell.protocol);
  r.session = std::to_string(cell.session);
  r.subject = std::to_string(cell.subject);
  r.method = kMethodSupervised;
  r.mean_acc = supervised_accuracy(model, test_pool);
  r.std_kind = "none";
  r.wall_seconds = seconds;
  return r;
}

/// Trains and evaluates every cell of the configured protocol. Rows come in
/// cell order (supervised, FSL, FSL+EvoFA), followed by aggregates.
inline ResultTable run_protocol(const ExperimentConfig& cfg, const DatasetIndex& ds, const RunHooks& hooks = {}) {
  cfg.validate_against(ds);
  ResultTable table;
  for (const Cell& cell : protocol_cells(cfg, ds)) {
    try {
      if (hooks.on_progress) hooks.on_progress("cell " + cell.label());
      Stopwatch sw;
      CellModels models = train_cell(cfg, ds, cell, hooks);
      const double train_seconds = sw.seconds();
      const Pool test_pool = cell.split.test_pool(ds);
      const Pool train_pool = cell.split.train_pool(ds);
      if (models.supervised) table.rows.push_back(supervised_row(cell, models.supervised->model, test_pool, train_seconds));
      const EvalConfig eval = cell_eval_config(cfg, cell);
      const PairedEvaluation paired =
          evaluate_paired(models.fsl.model, test_pool, train_pool, cfg.protocol, eval, cfg.adapt);
      table.rows.push_back(episode_row(cell, kMethodFsl, eval, paired.baseline, paired.baseline_seconds));
      table.rows.push_back(episode_row(cell, kMethodEvofa, eval, paired.adapted, paired.adapted_seconds));
    } catch (const Error&) {
      rethrow_with_context("subject " + std::to_string(cell.subject) + ", session " + std::to_string(cell.session) +
                           ": ");
    }
  }
  table.add_aggregates();
  return table;
}

/// Evaluates one model at each support size in `shots`, with or without
/// adaptation, on the configured episode count.
inline ResultTable shot_sweep(const Model& model, const Cell& cell, const Pool& test_pool, const Pool& train_pool,
                              const EvalConfig& eval, const AdaptConfig& adapt_cfg, const std::vector<std::size_t>& shots,
                              bool adapt) {
  if (shots.empty()) throw ConfigError("shot sweep: empty shots list");
  ResultTable table;
  for (std::size_t k : shots) {
    if (!k) throw ConfigError("shot sweep: shots must be >= 1");
    EvalConfig e = eval;
    e.k_shot = k;
    e.adapt = adapt;
    Stopwatch sw;
    const EvalReport report = evofa_test(model, test_pool, train_pool, cell.protocol, e, adapt_cfg);
    table.rows.push_back(episode_row(cell, adapt ? kMethodEvofa : kMethodFsl, e, report, sw.seconds()));
  }
  return table;
}

// ---------------------------------------------------------------------------
// Embedding export

/// CSV of adapted embeddings, one row per sample in dataset order.
inline std::string export_embeddings_csv(const Model& model, const Pool& pool, std::size_t chunk = 256) {
  Pool ordered = pool;
  std::sort(ordered.begin(), ordered.end(),
            [](const LabeledSample* a, const LabeledSample* b) { return ordering_key(*a) < ordering_key(*b); });
  Model local = model;
  std::ostringstream os;
  os << "subject,session,trial,time_index,label";
  for (std::size_t i = 1; i <= model.config.embedding_dim; ++i) os << ",e" << i;
  os << '\n';
  NoGradGuard no_grad;
  for (std::size_t begin = 0; begin < ordered.size(); begin += chunk) {
    const std::size_t end = std::min(ordered.size(), begin + chunk);
    Pool part(ordered.begin() + static_cast<std::ptrdiff_t>(begin), ordered.begin() + static_cast<std::ptrdiff_t>(end));
    const Tensor emb = embed(part, local, NormMode::eval);
    const std::size_t e = emb.dim(1);
    for (std::size_t i = 0; i < part.size(); ++i) {
      const auto* s = part[i];
      os << s->subject_id << ',' << s->session_id << ',' << s->trial_id << ',' << s->time_index << ',' << s->label;
      for (std::size_t t = 0; t < e; ++t) os << ',' << format_double(emb.data()[i * e + t]);
      os << '\n';
    }
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Logs and output tree

inline std::string training_log_csv(const TrainResult& r) {
  std::ostringstream os;
  os << "epoch,train_loss,val_accuracy\n";
  for (const auto& e : r.log) os << e.epoch << ',' << format_double(e.train_loss) << ',' << format_double(e.val_accuracy) << '\n';
  return os.str();
}

/// Output directory that remembers what it wrote so a failed run can be
/// rolled back to its prior state.
class OutputTree {
 public:
  explicit OutputTree(std::filesystem::path root) : root_(std::move(root)) {}

  const std::filesystem::path& root() const { return root_; }

  std::filesystem::path write(const std::filesystem::path& relative, const std::string& bytes) {
    const auto path = root_ / relative;
    note_directories(path.parent_path());
    const bool existed = std::filesystem::exists(path);
    io::write_file_atomic(path, bytes);
    if (!existed) files_.push_back(path);
    return path;
  }

  std::filesystem::path write_json(const std::filesystem::path& relative, const Json& j) {
    return write(relative, j.dump(2) + "\n");
  }

  /// Removes files and directories created by this tree, newest first.
  void rollback() noexcept {
    std::error_code ec;
    for (auto it = files_.rbegin(); it != files_.rend(); ++it) std::filesystem::remove(*it, ec);
    for (auto it = dirs_.rbegin(); it != dirs_.rend(); ++it) {
      if (std::filesystem::is_empty(*it, ec)) std::filesystem::remove(*it, ec);
    }
    files_.clear();
    dirs_.clear();
  }

  const std::vector<std::filesystem::path>& files() const { return files_; }

 private:
  void note_directories(const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> missing;
    for (auto p = dir; !p.empty() && !std::filesystem::exists(p); p = p.parent_path()) {
      missing.push_back(p);
      if (p == p.parent_path()) break;
    }
    for (auto it = missing.rbegin(); it != missing.rend(); ++it) {
      std::filesystem::create_directory(*it);
      dirs_.push_back(*it);
    }
  }

  std::filesystem::path root_;
  std::vector<std::filesystem::path> files_;
  std::vector<std::filesystem::path> dirs_;
};

inline Json run_manifest(const std::string& command, const Json& config, std::uint64_t seed) {
  return {{"tool", "evofa"}, {"version", version_string()}, {"command", command}, {"seed", seed}, {"config", config}};
}

}  // namespace evofa
