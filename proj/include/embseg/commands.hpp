#pragma once

// Command implementations behind the `embseg` executable. Each command takes
// parsed arguments, writes its artifacts plus a RunManifest, and returns a
// process exit code:
//   0 success, 1 check failed (gradcheck exceedance, replay mismatch),
//   2 usage / config / I/O error, 3 training aborted.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "embseg/archive.hpp"
#include "embseg/errors.hpp"
#include "embseg/experiment.hpp"
#include "embseg/gradcheck.hpp"
#include "embseg/label_space.hpp"
#include "embseg/seg_head.hpp"
#include "embseg/train_eval.hpp"

namespace embseg::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kCheckFailed = 1, kUsage = 2, kAborted = 3 };

inline std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw IoError("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline void write_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os) throw IoError("cannot write " + p.string());
  os << text;
}

struct RunManifest {
  std::string command;
  nlohmann::json config;  // fully materialized
  std::uint64_t seed = 0;
  std::map<std::string, std::string> inputs;   // role -> path
  std::string out;                             // output file or directory
  std::vector<std::string> metrics;            // metric outputs, relative to base
  std::map<std::string, std::string> hashes;   // relative path -> fnv1a64

  nlohmann::json to_json() const {
    return {{"command", command}, {"config", config},   {"seed", seed},
            {"inputs", inputs},   {"out", out},         {"metrics", metrics},
            {"hashes", hashes}};
  }

  static RunManifest from_json(const nlohmann::json& j) {
    RunManifest m;
    m.command = j.at("command").get<std::string>();
    m.config = j.at("config");
    m.seed = j.at("seed").get<std::uint64_t>();
    m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
    m.out = j.at("out").get<std::string>();
    m.metrics = j.at("metrics").get<std::vector<std::string>>();
    m.hashes = j.at("hashes").get<std::map<std::string, std::string>>();
    return m;
  }
};

inline RunManifest load_manifest(const fs::path& p) {
  try {
    return RunManifest::from_json(nlohmann::json::parse(read_file(p)));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(p.string() + ": " + e.what());
  }
}

// Hashes every file under `base` except manifests, keyed by relative path.
inline std::map<std::string, std::string> hash_tree(const fs::path& base) {
  std::map<std::string, std::string> out;
  if (fs::is_regular_file(base)) {
    out[base.filename().string()] = fnv1a_hex(read_file(base));
    return out;
  }
  for (const auto& e : fs::recursive_directory_iterator(base)) {
    if (!e.is_regular_file() || e.path().filename() == "manifest.json") continue;
    out[fs::relative(e.path(), base).generic_string()] = fnv1a_hex(read_file(e.path()));
  }
  return out;
}

// Seed precedence: EMBSEG_SEED, then --seed, then the config document.
// Replays pin the recorded seed and skip the environment.
inline std::optional<std::uint64_t> resolve_seed(std::optional<std::uint64_t> flag,
                                                 bool use_env = true) {
  if (const char* env = std::getenv("EMBSEG_SEED"); use_env && env && *env) {
    char* end = nullptr;
    errno = 0;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (errno != 0 || *end != '\0' || env[0] == '-') {
      throw ConfigError({std::string("EMBSEG_SEED: not an unsigned integer: ") + env});
    }
    return v;
  }
  return flag;
}

inline ExperimentConfig load_config(const fs::path& path, std::optional<std::uint64_t> seed) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  if (seed && doc.is_object()) doc["seed"] = *seed;
  return parse_config(doc);
}

inline void write_json(const fs::path& p, const nlohmann::json& j) { write_file(p, j.dump(2) + "\n"); }

inline void write_metrics(const fs::path& p, const std::vector<StepRecord>& steps) {
  std::ostringstream os;
  write_metrics_csv(os, steps);
  write_file(p, os.str());
}

// ---------------------------------------------------------------- labels

struct LabelsArgs {
  std::string action;  // sim | export | placeholder
  fs::path embeddings;
  fs::path out;
  std::optional<fs::path> blocks;
  fs::path names;  // placeholder: TSV of name <tab> description
  std::size_t dim = 512;
};

inline std::vector<int> read_blocks(const fs::path& p) {
  std::istringstream is(read_file(p));
  std::vector<int> blocks;
  std::string tok;
  while (is >> tok) {
    try {
      std::size_t used = 0;
      blocks.push_back(std::stoi(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw ParseError(p.string() + ": block id '" + tok + "' is not an integer");
    }
  }
  return blocks;
}

inline std::vector<std::pair<std::string, std::string>> read_names(const fs::path& p) {
  std::istringstream is(read_file(p));
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0) throw ParseError("expected name<TAB>description", lineno);
    out.emplace_back(line.substr(0, tab), line.substr(tab + 1));
  }
  return out;
}

inline int cmd_labels(const LabelsArgs& a, std::ostream& out) {
  RunManifest m;
  m.command = "labels";
  m.config = {{"action", a.action}};
  m.out = a.out.string();
  // Keyed by role: a replay writes under a different file name.
  std::map<std::string, fs::path> written{{"output", a.out}};
  if (a.action == "placeholder") {
    m.inputs["names"] = a.names.string();
    m.config["dim"] = a.dim;
    if (a.dim < 1) throw ConfigError({"--dim: must be >= 1"});
    std::vector<LabelRecord> recs;
    for (auto& [name, desc] : read_names(a.names)) {
      recs.push_back({recs.size(), name, desc, placeholder_embedding(name, a.dim)});
    }
    const LabelSpace space(std::move(recs));
    std::ostringstream os;
    write_label_space(os, space);
    write_file(a.out, os.str());
    out << "wrote " << space.size() << " placeholder embeddings of dimension " << a.dim << " to "
        << a.out.string() << '\n';
  } else {
    m.inputs["embeddings"] = a.embeddings.string();
    const LabelSpace space = load_label_space(a.embeddings);
    if (a.action == "sim") {
      const Matrix sim = similarity_matrix(space);
      std::ostringstream os;
      write_similarity_csv(os, space, sim);
      write_file(a.out, os.str());
      out << "labels " << space.size() << ", dimension " << space.dim() << ", similarity matrix "
          << space.size() << "x" << space.size() << " -> " << a.out.string() << '\n';
      if (a.blocks) {
        m.inputs["blocks"] = a.blocks->string();
        const auto blocks = read_blocks(*a.blocks);
        const BlockSummary b = block_summary(sim, blocks);
        const fs::path summary = a.out.string() + ".blocks.json";
        write_json(summary, {{"mean_within", b.mean_within}, {"mean_cross", b.mean_cross}});
        written["blocks_summary"] = summary;
        out << "mean within-block similarity " << detail::g9(b.mean_within)
            << ", mean cross-block similarity " << detail::g9(b.mean_cross) << '\n';
      }
    } else if (a.action == "export") {
      std::vector<LabelRecord> recs = space.records();
      for (std::size_t i = 0; i < recs.size(); ++i) {
        const auto row = space.unit_row(i);
        recs[i].embedding.assign(row.begin(), row.end());
      }
      std::ostringstream os;
      write_label_space(os, LabelSpace(std::move(recs)));
      write_file(a.out, os.str());
      out << "wrote " << space.size() << " unit-normalized embeddings to " << a.out.string() << '\n';
    } else {
      throw ConfigError({"labels: unknown action '" + a.action + "' (sim, export, placeholder)"});
    }
  }
  for (const auto& [role, path] : written) {
    m.metrics.push_back(role);
    m.hashes[role] = fnv1a_hex(read_file(path));
  }
  write_json(a.out.string() + ".manifest.json", m.to_json());
  return kOk;
}

// ---------------------------------------------------------------- synth / train / eval / zeroshot

struct RunArgs {
  fs::path config;
  std::optional<std::uint64_t> seed;
  fs::path out;
  std::optional<fs::path> checkpoint;  // eval (required), zeroshot (optional)
  bool seed_from_env = true;
};

inline void finish_manifest(RunManifest& m, const fs::path& out_dir) {
  m.out = out_dir.string();
  m.hashes = hash_tree(out_dir);
  write_json(out_dir / "manifest.json", m.to_json());
}

inline RunManifest start_manifest(const std::string& command, const RunArgs& a,
                                  const ExperimentConfig& cfg) {
  RunManifest m;
  m.command = command;
  m.config = to_json(cfg);
  m.seed = cfg.seed;
  m.inputs["config"] = a.config.string();
  if (a.checkpoint) m.inputs["checkpoint"] = a.checkpoint->string();
  return m;
}

inline int cmd_synth(const RunArgs& a, std::ostream& out) {
  const ExperimentConfig cfg = load_config(a.config, resolve_seed(a.seed, a.seed_from_env));
  const Experiment ex = prepare_experiment(cfg);
  RunManifest m = start_manifest("synth", a, cfg);
  fs::create_directories(a.out);
  {
    std::ostringstream os;
    write_label_space(os, ex.world.space);
    write_file(a.out / "labels.jsonl", os.str());
    std::string blocks;
    for (auto b : ex.world.blocks) blocks += std::to_string(b) + "\n";
    write_file(a.out / "blocks.txt", blocks);
    save_tensor(a.out / "mixing.tnsr",
                Tensor({ex.world.mixing.rows, ex.world.mixing.cols}, ex.world.mixing.values));
    std::vector<int> space_ids(ex.to_space.begin(), ex.to_space.end());
    write_json(a.out / "split.json",
               {{"seen", ex.seen}, {"heldout", ex.heldout}, {"space_id", space_ids}});
  }
  std::size_t total = 0;
  for (std::size_t d = 0; d < ex.pools.size(); ++d) {
    const fs::path ddir = a.out / "datasets" / cfg.datasets[d].name;
    for (std::size_t i = 0; i < ex.pools[d].size(); ++i) {
      char name[16];
      std::snprintf(name, sizeof name, "%04zu", i);
      save_sample(ddir / name, ex.pools[d][i]);
      ++total;
    }
  }
  const auto scenes = make_eval_scenes(ex, cfg.eval_scenes, !ex.heldout.empty());
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    char name[16];
    std::snprintf(name, sizeof name, "%04zu", i);
    const fs::path sdir = a.out / "eval" / name;
    fs::create_directories(sdir);
    save_tensor(sdir / "features.tnsr", scenes[i].features);
    save_pgm16(sdir / "truth.pgm", scenes[i].truth);
  }
  m.metrics = {"labels.jsonl", "split.json"};
  finish_manifest(m, a.out);
  out << "wrote " << total << " training samples in " << ex.pools.size() << " datasets and "
      << scenes.size() << " evaluation scenes to " << a.out.string() << '\n';
  return kOk;
}

inline void print_eval(std::ostream& out, const MetricsReport& rep) {
  out << "mIoU " << detail::g9(rep.eval.miou) << '\n';
  if (rep.zero_shot) {
    const auto& z = *rep.zero_shot;
    out << "zero-shot: overall mIoU " << detail::g9(z.overall.miou) << ", heldout mIoU "
        << (z.heldout_miou ? detail::g9(*z.heldout_miou) : std::string("undefined")) << '\n';
  }
}

inline int cmd_train(const RunArgs& a, std::ostream& out) {
  const ExperimentConfig cfg = load_config(a.config, resolve_seed(a.seed, a.seed_from_env));
  const Experiment ex = prepare_experiment(cfg);
  RunManifest m = start_manifest("train", a, cfg);
  const RunResult res = run_experiment(ex);
  fs::create_directories(a.out);
  save_checkpoint(a.out / "model", res.model);
  write_metrics(a.out / "metrics.csv", res.report.steps);
  write_json(a.out / "report.json", report_json(res.report, cfg));
  m.metrics = {"metrics.csv", "report.json"};
  finish_manifest(m, a.out);
  const auto& last = res.report.steps.back();
  out << "trained " << cfg.train.total_steps << " steps, final total loss "
      << detail::g9(last.total) << ", tau " << detail::g9(res.model.tau()) << '\n';
  print_eval(out, res.report);
  return kOk;
}

inline SegModel load_compatible(const fs::path& dir, const Experiment& ex) {
  SegModel model = load_checkpoint(dir);
  if (model.feature_dim() != ex.config.world.feature_dim ||
      model.embed_dim() != ex.config.world.embed_dim) {
    throw ShapeError("checkpoint maps " + std::to_string(model.feature_dim()) + " -> " +
                     std::to_string(model.embed_dim()) + ", config needs " +
                     std::to_string(ex.config.world.feature_dim) + " -> " +
                     std::to_string(ex.config.world.embed_dim));
  }
  return model;
}

inline int cmd_eval(const RunArgs& a, std::ostream& out) {
  if (!a.checkpoint) throw ConfigError({"eval: --checkpoint is required"});
  const ExperimentConfig cfg = load_config(a.config, resolve_seed(a.seed, a.seed_from_env));
  const Experiment ex = prepare_experiment(cfg);
  RunManifest m = start_manifest("eval", a, cfg);
  const SegModel model = load_compatible(*a.checkpoint, ex);
  MetricsReport rep;
  rep.eval = evaluate(model, ex.base_space, make_eval_scenes(ex, cfg.eval_scenes, false));
  fs::create_directories(a.out);
  write_json(a.out / "report.json", report_json(rep, cfg));
  m.metrics = {"report.json"};
  finish_manifest(m, a.out);
  print_eval(out, rep);
  return kOk;
}

// Trains first unless --checkpoint is given.
inline int cmd_zeroshot(const RunArgs& a, std::ostream& out) {
  const ExperimentConfig cfg = load_config(a.config, resolve_seed(a.seed, a.seed_from_env));
  if (cfg.heldout_per_block == 0) {
    throw ConfigError({"zeroshot.heldout_per_block: must be >= 1 for the zeroshot command"});
  }
  const Experiment ex = prepare_experiment(cfg);
  RunManifest m = start_manifest("zeroshot", a, cfg);
  fs::create_directories(a.out);
  RunResult res;
  if (a.checkpoint) {
    res.model = load_compatible(*a.checkpoint, ex);
    res.report.eval = evaluate(res.model, ex.base_space, make_eval_scenes(ex, cfg.eval_scenes, false));
    res.report.zero_shot = zero_shot_eval(res.model, ex.base_space, heldout_records(ex),
                                          make_eval_scenes(ex, cfg.eval_scenes, true));
    m.metrics = {"report.json"};
  } else {
    res = run_experiment(ex);
    save_checkpoint(a.out / "model", res.model);
    write_metrics(a.out / "metrics.csv", res.report.steps);
    m.metrics = {"metrics.csv", "report.json"};
  }
  write_json(a.out / "report.json", report_json(res.report, cfg));
  finish_manifest(m, a.out);
  print_eval(out, res.report);
  return kOk;
}

// ---------------------------------------------------------------- gradcheck

struct GradcheckArgs {
  std::string module = "all";
  std::size_t trials = 50;
  double eps = 1e-5;
  std::uint64_t seed = 0;
  std::optional<fs::path> out;  // directory for gradcheck.csv and the manifest
  bool seed_from_env = true;
};

inline int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out) {
  const auto seed = resolve_seed(a.seed, a.seed_from_env).value_or(0);
  const auto results = run_gradcheck(a.module, a.trials, a.eps, seed);
  std::ostringstream csv;
  csv << "target,group,trials,max_rel_error,ok\n";
  std::vector<std::string> offenders;
  for (const auto& r : results) {
    char line[160];
    std::snprintf(line, sizeof line, "%-18s %-7s max rel err %.3e  %s", r.name.c_str(),
                  r.group.c_str(), r.max_error, r.ok() ? "ok" : "EXCEEDS 1e-4");
    out << line << '\n';
    if (!r.failure.empty()) out << "    " << r.failure << '\n';
    csv << r.name << ',' << r.group << ',' << r.trials << ',' << detail::g9(r.max_error) << ','
        << (r.ok() ? 1 : 0) << '\n';
    if (!r.ok()) offenders.push_back(r.name);
  }
  if (a.out) {
    RunManifest m;
    m.command = "gradcheck";
    m.config = {{"module", a.module}, {"trials", a.trials}, {"eps", a.eps}};
    m.seed = seed;
    write_file(*a.out / "gradcheck.csv", csv.str());
    m.metrics = {"gradcheck.csv"};
    finish_manifest(m, *a.out);
  }
  if (offenders.empty()) {
    out << results.size() << " targets, all within 1e-4\n";
    return kOk;
  }
  out << offenders.size() << " of " << results.size() << " targets exceed 1e-4:";
  for (const auto& n : offenders) out << ' ' << n;
  out << '\n';
  return kCheckFailed;
}

// ---------------------------------------------------------------- error mapping and replay

inline int guarded(const std::function<int()>& body, std::ostream& err) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const NonFiniteError& e) {
    err << "training aborted: " << e.what() << '\n';
    return kAborted;
  } catch (const EmptyBatch& e) {
    err << "training aborted: " << e.what() << '\n';
    return kAborted;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }
}

inline int dispatch(const RunManifest& m, const fs::path& out_path, std::ostream& out);

// Re-runs the command recorded in `manifest` into `out_path` and compares the
// metric outputs byte for byte (via their hashes).
inline int cmd_replay(const fs::path& manifest, const fs::path& out_path, std::ostream& out) {
  const RunManifest m = load_manifest(manifest);
  const int code = dispatch(m, out_path, out);
  if (code != kOk) return code;
  const fs::path fresh_manifest = m.command == "labels"
                                      ? fs::path(out_path.string() + ".manifest.json")
                                      : out_path / "manifest.json";
  const RunManifest again = load_manifest(fresh_manifest);
  std::vector<std::string> differing;
  for (const auto& f : m.metrics) {
    const auto a = m.hashes.find(f);
    const auto b = again.hashes.find(f);
    if (a == m.hashes.end() || b == again.hashes.end() || a->second != b->second) {
      differing.push_back(f);
    }
  }
  if (!differing.empty()) {
    out << "replay differs in:";
    for (const auto& f : differing) out << ' ' << f;
    out << '\n';
    return kCheckFailed;
  }
  out << "replay identical: " << m.metrics.size() << " metric file(s)\n";
  return kOk;
}

inline int dispatch(const RunManifest& m, const fs::path& out_path, std::ostream& out) {
  auto input = [&](const char* role) -> std::optional<fs::path> {
    const auto it = m.inputs.find(role);
    if (it == m.inputs.end()) return std::nullopt;
    return fs::path(it->second);
  };
  if (m.command == "labels") {
    LabelsArgs a;
    a.action = m.config.at("action").get<std::string>();
    a.out = out_path;
    if (auto p = input("embeddings")) a.embeddings = *p;
    if (auto p = input("names")) a.names = *p;
    a.blocks = input("blocks");
    if (m.config.contains("dim")) a.dim = m.config.at("dim").get<std::size_t>();
    return cmd_labels(a, out);
  }
  if (m.command == "gradcheck") {
    GradcheckArgs a;
    a.module = m.config.at("module").get<std::string>();
    a.trials = m.config.at("trials").get<std::size_t>();
    a.eps = m.config.at("eps").get<double>();
    a.seed = m.seed;
    a.seed_from_env = false;
    a.out = out_path;
    return cmd_gradcheck(a, out);
  }
  RunArgs a;
  fs::create_directories(out_path);
  a.config = out_path / "config.json";
  write_json(a.config, m.config);
  a.seed = m.seed;
  a.seed_from_env = false;
  a.out = out_path;
  a.checkpoint = input("checkpoint");
  if (m.command == "synth") return cmd_synth(a, out);
  if (m.command == "train") return cmd_train(a, out);
  if (m.command == "eval") return cmd_eval(a, out);
  if (m.command == "zeroshot") return cmd_zeroshot(a, out);
  throw ConfigError({"manifest: unknown command '" + m.command + "'"});
}

}  // namespace embseg::cli
