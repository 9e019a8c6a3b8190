#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "imo/analysis.hpp"
#include "imo/datagen.hpp"
#include "imo/errors.hpp"
#include "imo/io.hpp"
#include "imo/json_util.hpp"
#include "imo/log.hpp"
#include "imo/model.hpp"
#include "imo/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace imo::cli {

namespace {

struct Options {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool force = false;
  int threads = 1;
};

/// Run failure carrying the run id for the error line.
struct RunFailure : RunError {
  RunFailure(std::string id, const std::string& what) : RunError(what), run_id(std::move(id)) {}
  std::string run_id;
};

json read_json(const std::string& path, const std::string& field) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const InputError& e) {
    throw ConfigError(field, e.what());
  }
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(field, std::string("invalid JSON: ") + e.what());
  }
}

json load_config(const Options& o) {
  if (o.config.empty()) throw ConfigError("--config", "required");
  json j = read_json(o.config, "--config");
  if (!j.is_object()) throw ConfigError("<root>", "expected an object");
  return j;
}

/// Creates `dir`, refusing to reuse a non-empty one unless forced.
void prepare_out(const Options& o) {
  if (o.out.empty()) throw ConfigError("--out", "required");
  if (fs::exists(o.out) && !fs::is_empty(o.out) && !o.force) {
    throw ConfigError("--out", o.out + " exists and is not empty; pass --force to overwrite");
  }
  fs::create_directories(o.out);
}

std::string join(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

// ---------------------------------------------------------------------------
// Data

struct Data {
  Corpus corpus;
  json description;                ///< how the data was obtained
  std::vector<std::string> files;  ///< inputs, for the content hash
};

/// Either {"corpus": CorpusSpec} (generated in memory) or {"data": {"dir",
/// "min_freq", "n_labels"}} (a gen-data directory or any JSONL triple).
Data load_data(const json& config, std::optional<std::uint64_t> seed, int max_len) {
  Data d;
  if (config.contains("corpus")) {
    CorpusSpec spec = corpus_spec_from_json(config.at("corpus"));
    if (seed) spec.seed = *seed;
    if (spec.t_max > max_len) {
      throw ConfigError("model.encoder.max_len", "shorter than corpus.t_max");
    }
    d.corpus = generate_corpus(spec);
    d.description = {{"corpus", to_json(spec)}};
    return d;
  }
  if (!config.contains("data")) throw ConfigError("data", "need \"data\" or \"corpus\"");
  const json& dj = config.at("data");
  const std::string dir = json_get(dj, "dir", std::string(), "data");
  if (dir.empty()) throw ConfigError("data.dir", "required");
  int n_labels = json_get(dj, "n_labels", 0, "data");
  if (n_labels == 0 && fs::exists(join(dir, "manifest.json"))) {
    n_labels = json_get(read_json(join(dir, "manifest.json"), "data.dir"), "n_labels", 2, "manifest");
  }
  if (n_labels == 0) n_labels = 2;
  const int min_freq = json_get(dj, "min_freq", 1, "data");
  const std::vector<RawExample> train_raw = read_jsonl(join(dir, "train.jsonl"), n_labels);
  const Vocabulary vocab = Vocabulary::build(train_raw, min_freq);
  d.corpus.n_labels = n_labels;
  d.corpus.vocab = vocab.words;
  d.corpus.train = encode_examples(train_raw, vocab, max_len);
  d.corpus.validation =
      encode_examples(read_jsonl(join(dir, "validation.jsonl"), n_labels), vocab, max_len);
  d.files = {join(dir, "train.jsonl"), join(dir, "validation.jsonl")};
  if (fs::exists(join(dir, "test.jsonl"))) {
    d.corpus.test = encode_examples(read_jsonl(join(dir, "test.jsonl"), n_labels), vocab, max_len);
    d.files.push_back(join(dir, "test.jsonl"));
  }
  d.description = {{"data", {{"dir", dir}, {"n_labels", n_labels}, {"min_freq", min_freq}}}};
  return d;
}

struct Setup {
  ModelConfig model;
  TrainConfig train;
  Data data;
  json config;
};

Setup load_setup(const Options& o) {
  Setup s;
  s.config = load_config(o);
  s.model = model_config_from_json(s.config.value("model", json::object()));
  s.train = train_config_from_json(s.config.value("train", json::object()));
  if (!s.config.contains("model") || !s.config["model"].contains("mask_variant")) {
    s.model.mask_variant = s.train.mask_variant;
  }
  if (o.seed) {
    s.model.encoder.seed = *o.seed;
    s.train.seed = *o.seed;
  }
  s.data = load_data(s.config, o.seed, s.model.encoder.max_len);
  s.model.encoder.vocab_size = static_cast<int>(s.data.corpus.vocab.size());
  s.model.n_labels = s.data.corpus.n_labels;
  s.model.validate();
  s.train.validate(s.model);
  return s;
}

/// Git blob ids of the config and data files.
json input_hashes(const Options& o, const std::vector<std::string>& files) {
  json h = json::object();
  h[o.config] = git_blob_hash(read_file(o.config));
  for (const std::string& f : files) h[f] = git_blob_hash(read_file(f));
  return h;
}

std::vector<std::uint64_t> seeds_from(const json& config, const Options& o) {
  if (o.seed) return {*o.seed};
  return json_get(config, "seeds", std::vector<std::uint64_t>{0, 1, 2, 3, 4}, "");
}

// ---------------------------------------------------------------------------
// Commands

int cmd_gen_data(const Options& o) {
  const json config = load_config(o);
  CorpusSpec spec = corpus_spec_from_json(config.value("corpus", json::object()));
  if (o.seed) spec.seed = *o.seed;
  prepare_out(o);
  const Corpus corpus = generate_corpus(spec);
  write_corpus(spec, corpus, o.out);
  std::cout << join(o.out, "manifest.json") << "\n";
  return 0;
}

int cmd_train(const Options& o) {
  Setup s = load_setup(o);
  prepare_out(o);
  json effective{{"model", to_json(s.model)}, {"train", to_json(s.train)}};
  effective.update(s.data.description);
  // Derived from the effective config so that reruns log identical ids.
  const std::string run_id = sha1_hex(effective.dump()).substr(0, 12);
  const auto t0 = std::chrono::steady_clock::now();
  Model model(s.model);
  TrainResult result;
  try {
    result = train(model, s.data.corpus.train, s.data.corpus.validation, s.train, run_id);
  } catch (const RunError& e) {
    throw RunFailure(run_id, e.what());
  }
  Model& selected = result.model();
  const Metric metric = s.train.selection_metric(s.model);
  const int st = result.stages[result.selected].stage;

  std::vector<MetricRow> rows = result.metrics;
  rows.push_back({run_id, st, -1, "validation", to_string(metric),
                  evaluate(selected, s.data.corpus.validation, metric), 0.0, 0.0});
  for (const auto& [domain, v] : evaluate_domains(selected, s.data.corpus.test, metric)) {
    rows.push_back({run_id, st, -1, "test:" + domain, to_string(metric), v, 0.0, 0.0});
  }
  write_file(join(o.out, "metrics.csv"), metrics_csv(rows));

  fs::create_directories(join(o.out, "checkpoints"));
  json stages = json::array();
  for (const StageRecord& r : result.stages) {
    const std::string ckpt = "checkpoints/stage_" + std::to_string(r.stage) + ".json";
    save_checkpoint(r.model, join(o.out, ckpt));
    stages.push_back({{"stage", r.stage},
                      {"masked_layers", r.masked_layers},
                      {"trained_layers", r.trained_layers},
                      {"validation_metric", r.validation_metric},
                      {"sparsity_fraction", r.sparsity_fraction},
                      {"checkpoint", ckpt},
                      {"wallclock_s", r.wallclock_s}});
  }
  save_checkpoint(selected, join(o.out, "model.json"));

  write_file(join(o.out, "config.json"), effective.dump(2) + "\n");
  write_file(join(o.out, "vocab.json"), json(s.data.corpus.vocab).dump() + "\n");

  json masks = json::array();
  for (const MaskSnapshot& snap : selected.mask_snapshots()) masks.push_back(to_json(snap));
  write_file(join(o.out, "masks.json"), masks.dump(2) + "\n");

  const std::size_t n_dump = std::min<std::size_t>(20, s.data.corpus.validation.size());
  const std::vector<Example> dump_set(s.data.corpus.validation.begin(),
                                      s.data.corpus.validation.begin() +
                                          static_cast<std::ptrdiff_t>(n_dump));
  write_file(join(o.out, "attention.json"),
             attention_dump(selected, dump_set, s.data.corpus.vocab).dump(2) + "\n");

  const double total_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  json run{{"run_id", run_id},
           {"seed", s.train.seed},
           {"seed_override", o.seed ? json(*o.seed) : json(nullptr)},
           {"inputs", input_hashes(o, s.data.files)},
           {"stages", stages},
           {"selected_stage", st},
           {"checksum", selected.checksum()},
           {"wallclock_s", total_s}};
  write_file(join(o.out, "run.json"), run.dump(2) + "\n");
  std::cout << join(o.out, "model.json") << "\n";
  return 0;
}

/// Evaluates RUN_DIR/model.json on the data recorded in RUN_DIR/config.json
/// and writes RUN_DIR/eval.json.
int cmd_eval(const Options& o) {
  if (o.out.empty()) throw ConfigError("--out", "required (the run directory)");
  const std::string config_path = join(o.out, "config.json");
  Options inner = o;
  inner.config = config_path;
  inner.seed.reset();
  const json config = load_config(inner);
  Model model = load_checkpoint(join(o.out, "model.json"));
  const Data data = load_data(config, std::nullopt, model.config().encoder.max_len);
  const TrainConfig tc = train_config_from_json(config.value("train", json::object()));
  const Metric metric = tc.selection_metric(model.config());
  json report{{"metric", to_string(metric)},
              {"validation", evaluate(model, data.corpus.validation, metric)}};
  json test = json::object();
  for (const auto& [domain, v] : evaluate_domains(model, data.corpus.test, metric)) test[domain] = v;
  report["test"] = test;
  report["checksum"] = model.checksum();
  write_file(join(o.out, "eval.json"), report.dump(2) + "\n");
  std::cout << report.dump() << "\n";
  return 0;
}

std::vector<Variant> variants_from(const json& config) {
  if (!config.contains("variants")) return standard_variants();
  std::vector<Variant> out;
  for (const std::string& name :
       json_get(config, "variants", std::vector<std::string>{}, "")) {
    out.push_back(variant_by_name(name));
  }
  if (out.empty()) throw ConfigError("variants", "must be non-empty");
  return out;
}

json outcomes_sidecar(const Options& o, const Setup& s, const std::vector<std::uint64_t>& seeds,
                      const std::vector<RunOutcome>& outcomes) {
  json checksums = json::array();
  for (const RunOutcome& r : outcomes) {
    checksums.push_back({{"variant", r.variant},
                         {"seed", r.seed},
                         {"train_size", r.train_size},
                         {"checksum", r.checksum}});
  }
  json config{{"model", to_json(s.model)}, {"train", to_json(s.train)}};
  config.update(s.data.description);
  return json{{"config", config},
              {"seeds", seeds},
              {"seed_override", o.seed ? json(*o.seed) : json(nullptr)},
              {"inputs", input_hashes(o, s.data.files)},
              {"runs", checksums}};
}

int cmd_ablate(const Options& o) {
  Setup s = load_setup(o);
  const std::vector<Variant> variants = variants_from(s.config);
  const std::vector<std::uint64_t> seeds = seeds_from(s.config, o);
  prepare_out(o);
  std::vector<RunOutcome> outcomes;
  try {
    outcomes = ablation_suite(s.data.corpus, s.model, s.train, variants, seeds, o.threads);
  } catch (const RunError& e) {
    throw RunFailure("ablate", e.what());
  }
  write_file(join(o.out, "ablation.csv"), outcomes_csv(outcomes));
  json side = outcomes_sidecar(o, s, seeds, outcomes);
  json names = json::array();
  for (const Variant& v : variants) names.push_back(v.name);
  side["variants"] = names;
  write_file(join(o.out, "ablation.json"), side.dump(2) + "\n");
  std::cout << join(o.out, "ablation.csv") << "\n";
  return 0;
}

int cmd_size_sweep(const Options& o) {
  Setup s = load_setup(o);
  const std::vector<std::size_t> sizes = json_get(
      s.config, "sizes", std::vector<std::size_t>{250, 1000, 4000}, "size_sweep");
  const std::vector<std::uint64_t> seeds = seeds_from(s.config, o);
  prepare_out(o);
  std::vector<RunOutcome> outcomes;
  try {
    outcomes = size_sweep(s.data.corpus, sizes, s.model, s.train, seeds, o.threads);
  } catch (const RunError& e) {
    throw RunFailure("size-sweep", e.what());
  }
  write_file(join(o.out, "size_sweep.csv"), outcomes_csv(outcomes));
  json side = outcomes_sidecar(o, s, seeds, outcomes);
  side["sizes"] = sizes;
  write_file(join(o.out, "size_sweep.json"), side.dump(2) + "\n");
  std::cout << join(o.out, "size_sweep.csv") << "\n";
  return 0;
}

/// {"runs": [RUN_DIR...], "names": [...], "layer": L, "permutations": 100}
int cmd_analyze_masks(const Options& o) {
  const json config = load_config(o);
  const auto runs = json_get(config, "runs", std::vector<std::string>{}, "");
  if (runs.size() < 2) throw ConfigError("runs", "need at least 2 run directories");
  auto names = json_get(config, "names", runs, "");
  if (names.size() != runs.size()) throw ConfigError("names", "one name per run required");
  const int permutations = json_get(config, "permutations", 100, "");
  prepare_out(o);
  std::vector<MaskSnapshot> snaps;
  int layer = json_get(config, "layer", 0, "");
  for (const std::string& dir : runs) {
    const json masks = read_json(join(dir, "masks.json"), "runs");
    int top = layer;
    if (top == 0) {
      for (const json& m : masks) top = std::max(top, m.at("layer_index").get<int>());
    }
    std::optional<MaskSnapshot> found;
    for (const json& m : masks) {
      MaskSnapshot snap = mask_snapshot_from_json(m);
      if (snap.layer_index == top && snap.label <= 0) {
        found = snap;
        break;
      }
    }
    if (!found) throw InputError(dir + ": no mask at layer " + std::to_string(top));
    snaps.push_back(*found);
  }
  const SimilarityTable table = mask_similarity(names, snaps);
  write_file(join(o.out, "similarity.csv"), similarity_csv(table));
  json baselines = json::array();
  const std::uint64_t seed = o.seed.value_or(0);
  for (std::size_t i = 0; i < snaps.size(); ++i) {
    for (std::size_t j = i + 1; j < snaps.size(); ++j) {
      const PermutationBaseline b = permutation_baseline(snaps[i], snaps[j], permutations, seed);
      baselines.push_back({{"a", names[i]},
                           {"b", names[j]},
                           {"cosine", table.cosine[i][j]},
                           {"jaccard", table.jaccard[i][j]},
                           {"permuted_cosine_mean", b.cosine_mean},
                           {"permuted_jaccard_mean", b.jaccard_mean}});
    }
  }
  json side{{"runs", runs},
            {"names", names},
            {"permutations", permutations},
            {"seed", seed},
            {"inputs", input_hashes(o, {})},
            {"pairs", baselines}};
  write_file(join(o.out, "similarity.json"), side.dump(2) + "\n");
  std::cout << join(o.out, "similarity.csv") << "\n";
  return 0;
}

/// {"run": RUN_DIR, "train": {...}}. Head retraining uses the run's train
/// config with any overrides given here.
int cmd_reverse_mask(const Options& o) {
  const json config = load_config(o);
  const std::string run = json_get(config, "run", std::string(), "");
  if (run.empty()) throw ConfigError("run", "required");
  json run_config = read_json(join(run, "config.json"), "run");
  json train_json = run_config.value("train", json::object());
  if (config.contains("train")) train_json.update(config.at("train"));
  TrainConfig tc = train_config_from_json(train_json);
  if (o.seed) tc.seed = *o.seed;
  Model model = load_checkpoint(join(run, "model.json"));
  const Data data = load_data(run_config, std::nullopt, model.config().encoder.max_len);
  if (data.corpus.test.empty()) throw InputError(run + ": data has no test split");
  prepare_out(o);
  const std::string before = model.checksum();
  const std::string source = run_config.contains("corpus")
                                 ? run_config["corpus"].value("source", std::string("source"))
                                 : domains_of(data.corpus.train).front();
  ReverseMaskReport report;
  try {
    report = reverse_mask_study(model, data.corpus.train, data.corpus.test, tc, source);
  } catch (const RunError& e) {
    throw RunFailure("reverse-mask", e.what());
  }
  if (model.checksum() != before) throw RunFailure("reverse-mask", "input model was modified");
  std::string csv = "domain,original,reversed,delta\n";
  for (std::size_t i = 0; i < report.original.size(); ++i) {
    csv += report.original[i].first + "," + format_double(report.original[i].second) + "," +
           format_double(report.reversed[i].second) + "," +
           format_double(report.reversed[i].second - report.original[i].second) + "\n";
  }
  write_file(join(o.out, "reverse_mask.csv"), csv);
  json side = to_json(report);
  side["run"] = run;
  side["train"] = to_json(tc);
  side["model_checksum"] = before;
  side["inputs"] = input_hashes(o, data.files);
  write_file(join(o.out, "reverse_mask.json"), side.dump(2) + "\n");
  std::cout << join(o.out, "reverse_mask.csv") << "\n";
  return 0;
}

void print_error(const std::string& kind, const std::string& key, const std::string& value,
                 const std::string& message) {
  json e{{"error", kind}, {"message", message}};
  if (!key.empty()) e[key] = value;
  std::cerr << e.dump() << "\n";
}

}  // namespace

int run(const std::vector<std::string>& args) {
  configure_logging();
  CLI::App app{"IMO: invariant-feature masks on a toy transformer", "imo"};
  app.require_subcommand(1);
  Options o;
  std::uint64_t seed = 0;
  auto add_common = [&](CLI::App* sub, bool needs_config) {
    auto* c = sub->add_option("--config", o.config, "JSON config file");
    if (needs_config) c->required();
    sub->add_option("--out", o.out, "output directory")->required();
    sub->add_option("--seed", seed, "seed override (recorded in the sidecar)");
    sub->add_flag("--force", o.force, "overwrite a non-empty output directory");
    sub->add_option("--threads", o.threads, "worker threads for independent runs")
        ->check(CLI::Range(1, 1024));
  };
  struct Command {
    const char* name;
    const char* help;
    int (*fn)(const Options&);
    bool needs_config;
  };
  const Command commands[] = {
      {"gen-data", "generate a synthetic corpus", cmd_gen_data, true},
      {"train", "train a model", cmd_train, true},
      {"eval", "evaluate a run directory's selected model", cmd_eval, false},
      {"ablate", "run the ablation grid", cmd_ablate, true},
      {"analyze-masks", "mask similarity across runs", cmd_analyze_masks, true},
      {"reverse-mask", "complemented-mask study", cmd_reverse_mask, true},
      {"size-sweep", "training-size sweep", cmd_size_sweep, true},
  };
  std::vector<std::pair<CLI::App*, const Command*>> subs;
  for (const Command& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    add_common(sub, c.needs_config);
    subs.emplace_back(sub, &c);
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    print_error("usage", "", "", e.what());
    return 2;
  }
  for (const auto& [sub, cmd] : subs) {
    if (!sub->parsed()) continue;
    if (sub->count("--seed")) o.seed = seed;
    try {
      return cmd->fn(o);
    } catch (const ConfigError& e) {
      print_error("config", "field", e.field, e.what());
      return 2;
    } catch (const UsageError& e) {
      print_error("usage", "", "", e.what());
      return 2;
    } catch (const RunFailure& e) {
      print_error("runtime", "run_id", e.run_id, e.what());
      return 1;
    } catch (const std::exception& e) {
      print_error("runtime", "run_id", fs::path(o.out).filename().string(), e.what());
      return 1;
    }
  }
  return 2;
}

}  // namespace imo::cli
