#include "cli.hpp"

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "unsafespot/calibrate.hpp"
#include "unsafespot/corpus.hpp"
#include "unsafespot/error.hpp"
#include "unsafespot/eval.hpp"
#include "unsafespot/features.hpp"
#include "unsafespot/model.hpp"
#include "unsafespot/parallel.hpp"
#include "unsafespot/propose.hpp"
#include "unsafespot/stats.hpp"
#include "unsafespot/synth.hpp"

namespace unsafespot::cli {

namespace fs = std::filesystem;

namespace {

/// Options shared by every subcommand. Flags override the config file.
struct RunConfig {
  std::string functions;
  std::string lines;
  std::string spans;
  std::string model;
  std::string cal;          // calibration corpus (labeled.jsonl)
  std::string calibration;  // calibration report (calibration.json)
  std::string train;
  std::string test;
  std::string out;
  std::size_t max_depth = FeatureConfig{}.max_depth;
  std::size_t max_tokens = FeatureConfig{}.max_tokens;
  double epsilon = 0.1;
  double delta = 1e-3;
  std::uint64_t seed = 0;
  int jobs = 0;
  bool features_given = false;  // --max-depth or --max-tokens set by flag or config

  FeatureConfig features() const { return {max_depth, max_tokens}; }
};

std::ifstream open_in(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cli.IOError", "cannot open " + path, ErrorKind::Runtime);
  return in;
}

std::string read_text(const std::string& path) {
  auto in = open_in(path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

json read_json(const std::string& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw Error("cli.CorruptFile", path + ": " + e.what());
  }
}

/// Writes `name` under --out, or to stdout when --out is absent.
class Sink {
public:
  Sink(const std::string& out_dir, std::ostream& stdout_stream)
      : dir_(out_dir), stdout_(stdout_stream) {
    if (!dir_.empty()) fs::create_directories(dir_);
  }

  bool to_directory() const { return !dir_.empty(); }
  const fs::path& dir() const { return dir_; }

  void emit(const std::string& name, const std::string& content, bool primary = true) {
    if (dir_.empty()) {
      if (primary) stdout_ << content;
      return;
    }
    const fs::path path = dir_ / name;
    auto tmp = path;
    tmp += ".tmp";
    {
      std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
      if (!f) throw Error("cli.IOError", "cannot write " + tmp.string(), ErrorKind::Runtime);
      f << content;
      if (!f) throw Error("cli.IOError", "write failed for " + tmp.string(), ErrorKind::Runtime);
    }
    fs::rename(tmp, path);
  }

  void emit_json(const std::string& name, const json& j, bool primary = true) {
    emit(name, j.dump(2) + "\n", primary);
  }

private:
  fs::path dir_;
  std::ostream& stdout_;
};

std::vector<LabeledFunction> read_labeled_file(const std::string& path) {
  auto in = open_in(path);
  return read_labeled(in);
}

/// Accepts labeled records or bare function records (taken as unlabeled).
std::vector<LabeledFunction> read_any_functions(const std::string& path) {
  auto in = open_in(path);
  std::string first;
  while (std::getline(in, first)) {
    if (first.find_first_not_of(" \t\r") != std::string::npos) break;
  }
  bool labeled = false;
  if (!first.empty()) {
    try {
      labeled = json::parse(first).contains("u");
    } catch (const json::exception&) {
      labeled = false;
    }
  }
  in.clear();
  in.seekg(0);
  if (labeled) return read_labeled(in);
  std::vector<LabeledFunction> out;
  for (auto& f : ingest_disassembly(in)) out.push_back({std::move(f), LabelSet{}, std::nullopt});
  return out;
}

Corpus make_corpus(std::string name, Split split, std::vector<LabeledFunction> functions) {
  Corpus c;
  c.name = std::move(name);
  c.split = split;
  c.functions = std::move(functions);
  return c;
}

ScoreModel read_model(const std::string& path) {
  auto in = open_in(path);
  return load_model(in);
}

/// Deep sizes must use the expansion the model was trained with; an explicit
/// different setting is refused rather than silently ignored.
ScoreModel read_model(const RunConfig& rc, std::string_view module) {
  auto model = read_model(rc.model);
  if (rc.features_given && !(rc.features() == model.features)) {
    throw Error(std::string(module) + ".ConfigMismatch",
                "--max-depth/--max-tokens differ from the model's feature config");
  }
  return model;
}

std::string labeled_text(std::span<const LabeledFunction> functions) {
  std::ostringstream out;
  write_labeled(out, functions);
  return out.str();
}

void check_rates(const RunConfig& rc) {
  if (!(rc.epsilon > 0.0 && rc.epsilon < 1.0)) {
    throw Error("cli.InvalidConfig", "epsilon must lie in (0, 1)");
  }
  if (!(rc.delta > 0.0 && rc.delta < 1.0)) throw Error("cli.InvalidConfig", "delta must lie in (0, 1)");
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw Error("cli.InvalidConfig", std::string(flag) + " is required");
}

// ---------------------------------------------------------------------------
// label

struct LabelOptions {
  bool split = false;
  std::vector<double> fractions = {0.5, 0.25, 0.25};
  std::string group_key = "package";
  std::string name = "corpus";
};

/// Projects labels with either one line map or a directory holding one map per
/// binary (file stem = binary_id).
LabelProjection project(const std::vector<FunctionRecord>& functions, const std::string& lines,
                        std::span<const SourceSpan> spans) {
  if (!fs::is_directory(lines)) return project_labels(functions, ingest_debug_lines(lines), spans);

  std::map<std::string, fs::path> maps;
  for (const auto& entry : fs::directory_iterator(lines)) {
    if (entry.is_regular_file()) maps.emplace(entry.path().stem().string(), entry.path());
  }
  std::map<std::string, std::vector<std::size_t>> by_binary;
  for (std::size_t i = 0; i < functions.size(); ++i) by_binary[functions[i].binary_id].push_back(i);

  LabelProjection total;
  total.functions.resize(functions.size());
  total.bug_labels = std::any_of(spans.begin(), spans.end(), [](const SourceSpan& s) { return s.is_bug(); });
  for (const auto& [binary, indices] : by_binary) {
    std::vector<FunctionRecord> subset;
    subset.reserve(indices.size());
    for (auto i : indices) subset.push_back(functions[i]);
    DebugLineMap map;
    if (auto it = maps.find(binary); it != maps.end()) map = ingest_debug_lines(it->second);
    auto part = project_labels(subset, map, spans);
    total.instructions += part.instructions;
    total.unmapped_instructions += part.unmapped_instructions;
    for (std::size_t k = 0; k < indices.size(); ++k) total.functions[indices[k]] = std::move(part.functions[k]);
  }
  return total;
}

void cmd_label(const RunConfig& rc, const LabelOptions& opt, Sink& sink) {
  require(rc.functions, "--functions");
  require(rc.lines, "--lines");
  std::vector<FunctionRecord> functions;
  {
    auto in = open_in(rc.functions);
    functions = ingest_disassembly(in);
  }
  std::vector<SourceSpan> spans;
  if (!rc.spans.empty()) {
    auto in = open_in(rc.spans);
    spans = read_spans(in);
  }
  const auto projection = project(functions, rc.lines, spans);
  sink.emit("labeled.jsonl", labeled_text(projection.functions));

  json summary = {{"functions", projection.functions.size()}, {"projection", projection.provenance()}};
  if (opt.split) {
    if (opt.fractions.size() != 3) throw Error("cli.InvalidConfig", "--fractions takes three values");
    const auto splits = split_corpus(projection.functions, parse_grouping_key(opt.group_key),
                                     {opt.fractions[0], opt.fractions[1], opt.fractions[2]}, rc.seed);
    json counts = json::object();
    for (const auto& c : splits) {
      const std::string name(split_name(c.split));
      sink.emit("labeled." + name + ".jsonl", labeled_text(c.functions), false);
      counts[name] = c.functions.size();
    }
    summary["splits"] = counts;
    summary["group_key"] = opt.group_key;
    summary["seed"] = rc.seed;
  }
  sink.emit_json("label.json", summary, false);
}

// ---------------------------------------------------------------------------
// featurize

void cmd_featurize(const RunConfig& rc, Sink& sink) {
  require(rc.functions, "--functions");
  const auto functions = read_any_functions(rc.functions);
  const FunctionIndex index{std::span<const LabeledFunction>(functions)};

  FeatureConfig config = rc.features();
  std::optional<Vocabulary> vocabulary;
  if (!rc.model.empty()) {
    const auto model = read_model(rc, "features");
    config = model.features;
    vocabulary = model.vocabulary;
  }
  std::vector<TokenSequence> tokens(functions.size());
  for (std::size_t i = 0; i < functions.size(); ++i) {
    tokens[i] = tokenize(functions[i].function, index, config);
  }
  if (!vocabulary) vocabulary = Vocabulary::build(tokens);
  const auto sizes = deep_sizes(function_refs(std::span<const LabeledFunction>(functions)), index, config);

  std::string rows;
  for (std::size_t i = 0; i < functions.size(); ++i) {
    json row = feature_row(functions[i].function, vectorize(tokens[i], *vocabulary), sizes[i]);
    row["truncated"] = tokens[i].truncated;
    row["depth_max_reached"] = tokens[i].depth_max_reached;
    rows += row.dump() + "\n";
  }
  sink.emit("features.jsonl", rows);
  json vocab = {{"features", to_json(config)},
                {"hash", vocabulary->hash()},
                {"tokens", vocabulary->to_json()}};
  sink.emit_json("vocab.json", vocab, false);
}

// ---------------------------------------------------------------------------
// train / finetune

struct HyperOptions {
  std::size_t epochs = TrainHyper{}.epochs;
  double lr = TrainHyper{}.lr;
  double l2 = TrainHyper{}.l2;
  std::size_t batch_size = TrainHyper{}.batch_size;
  bool no_class_balance = false;
  std::string kind = "reference-linear";

  TrainHyper hyper(std::uint64_t seed) const {
    TrainHyper h;
    h.epochs = epochs;
    h.lr = lr;
    h.l2 = l2;
    h.batch_size = batch_size;
    h.class_balance = !no_class_balance;
    h.seed = seed;
    return h;
  }
};

std::string model_text(const ScoreModel& model) {
  std::ostringstream out;
  save_model(model, out);
  return out.str();
}

void cmd_train(const RunConfig& rc, const HyperOptions& opt, Sink& sink) {
  require(rc.train, "--train");
  const ModelKind kind = parse_model_kind(opt.kind);
  ScoreModel model;
  if (kind == ModelKind::ReferenceLinear) {
    const auto corpus = make_corpus("train", Split::Train, read_labeled_file(rc.train));
    model = train_reference(corpus, rc.features(), opt.hyper(rc.seed));
  } else {
    model = make_baseline(kind, rc.features(), rc.seed);
  }
  sink.emit("model.json", model_text(model));
}

void cmd_finetune(const RunConfig& rc, const HyperOptions& opt, Sink& sink) {
  require(rc.model, "--model");
  require(rc.train, "--train");
  const auto base = read_model(rc, "model");
  const auto target = make_corpus("target", Split::Train, read_labeled_file(rc.train));
  sink.emit("model.json", model_text(fine_tune(base, target, opt.hyper(rc.seed))));
}

// ---------------------------------------------------------------------------
// calibrate / evaluate / propose

void cmd_calibrate(const RunConfig& rc, Sink& sink) {
  require(rc.model, "--model");
  require(rc.cal, "--cal");
  check_rates(rc);
  const auto model = read_model(rc, "calibrate");
  const auto cal = make_corpus("calibration", Split::Val, read_labeled_file(rc.cal));
  sink.emit_json("calibration.json", to_json(calibrate_model(model, cal, rc.epsilon, rc.delta)));
}

void cmd_evaluate(const RunConfig& rc, const std::string& view, Sink& sink, std::ostream& err) {
  require(rc.model, "--model");
  require(rc.test, "--test");
  const auto model = read_model(rc, "eval");
  const auto test = make_corpus("test", Split::Test, read_labeled_file(rc.test));
  std::optional<CalibrationReport> calibration;
  if (!rc.calibration.empty()) calibration = calibration_from_json(read_json(rc.calibration));
  const auto label_view = LabelView::parse(view);

  const auto report = evaluate(test, model, calibration);
  sink.emit_json("eval.json", to_json(report));
  sink.emit("curve.csv", curve_csv(curve(test, model, label_view)), false);
  if (calibration && report.bug_at_threshold && report.bug_at_threshold->split_overlap) {
    err << "warning: eval.SplitOverlap: calibration and test share grouping keys\n";
  }
}

void cmd_propose(const RunConfig& rc, Sink& sink) {
  require(rc.model, "--model");
  require(rc.calibration, "--calibration");
  require(rc.functions, "--functions");
  const auto model = read_model(rc, "propose");
  const auto calibration = calibration_from_json(read_json(rc.calibration));
  const auto functions = read_any_functions(rc.functions);
  const auto proposals = classify(model, calibration, functions);

  json sets = json::array();
  for (const auto& p : proposals) sets.push_back(to_json(p));
  if (sink.to_directory()) write_campaign(proposals, sink.dir());
  sink.emit_json("proposals.json", sets);
}

// ---------------------------------------------------------------------------
// verify-guarantee / stats / analyze-fuzz / synth

struct GuaranteeOptions {
  std::size_t n_cal = 100;
  std::size_t trials = 2000;
  double exponent = 1.0;
};

void cmd_verify(const RunConfig& rc, const GuaranteeOptions& opt, Sink& sink) {
  check_rates(rc);
  const auto result =
      verify_guarantee(ScoreLaw{opt.exponent}, opt.n_cal, rc.epsilon, rc.delta, opt.trials, rc.seed);
  json j = to_json(result);
  j["n_cal"] = opt.n_cal;
  j["epsilon"] = rc.epsilon;
  j["delta"] = rc.delta;
  j["exponent"] = opt.exponent;
  j["seed"] = rc.seed;
  j["within_bound"] = result.violation_rate <= rc.delta + 3.0 * result.sigma;
  sink.emit_json("guarantee.json", j);
}

void cmd_stats(const RunConfig& rc, Sink& sink) {
  require(rc.functions, "--functions");
  const auto corpus = make_corpus("corpus", Split::Train, read_labeled_file(rc.functions));
  sink.emit_json("stats.json", to_json(corpus_stats(corpus, rc.features())));
}

void cmd_analyze_fuzz(const std::string& outcomes, Sink& sink) {
  auto in = open_in(outcomes);
  const auto records = read_fuzz_outcomes(in);
  sink.emit_json("fuzz.json", to_json(analyze_fuzz(records)));
}

std::string lines_text(const DebugLineMap& map) {
  std::string out;
  char buf[32];
  for (const auto& e : map.entries) {
    std::snprintf(buf, sizeof buf, "%llx", static_cast<unsigned long long>(e.address));
    out += buf;
    out += ' ';
    out += e.file;
    out += ' ';
    out += std::to_string(e.line);
    out += '\n';
  }
  return out;
}

void cmd_synth(const RunConfig& rc, SynthConfig config, Sink& sink) {
  if (!sink.to_directory()) throw Error("cli.InvalidConfig", "synth needs --out");
  config.seed = rc.seed;
  const auto corpus = make_synthetic(config);
  std::ostringstream functions;
  write_functions(functions, corpus.functions);
  sink.emit("functions.jsonl", functions.str());
  sink.emit("lines.txt", lines_text(corpus.lines));
  sink.emit("spans.json", spans_to_json(corpus.spans).dump(2) + "\n");
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Unsafe-code spotting for compiled binaries: labeling, scoring, PAC calibration "
               "and fuzzing focus lists."};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "TOML/INI file with default flag values")
      ->envname("UNSAFESPOT_CONFIG");

  RunConfig rc;
  app.add_option("--functions", rc.functions, "functions.jsonl or labeled.jsonl");
  app.add_option("--lines", rc.lines, "Debug-line map: ELF, text table, or a directory of per-binary maps");
  app.add_option("--spans", rc.spans, "spans.json");
  app.add_option("--model", rc.model, "model.json");
  app.add_option("--cal", rc.cal, "Calibration corpus (labeled.jsonl)");
  app.add_option("--calibration", rc.calibration, "calibration.json");
  app.add_option("--train", rc.train, "Training corpus (labeled.jsonl)");
  app.add_option("--test", rc.test, "Test corpus (labeled.jsonl)");
  app.add_option("--out", rc.out, "Output directory (stdout when absent)");
  auto* depth_opt = app.add_option("--max-depth", rc.max_depth, "Callee inlining depth")->capture_default_str();
  auto* tokens_opt = app.add_option("--max-tokens", rc.max_tokens, "Token budget per function")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app.add_option("--epsilon", rc.epsilon, "Miss-rate tolerance")->capture_default_str();
  app.add_option("--delta", rc.delta, "Failure probability")->capture_default_str();
  app.add_option("--seed", rc.seed, "Seed for every random choice")->capture_default_str();
  app.add_option("--jobs", rc.jobs, "Worker threads (0 = all cores)")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();

  LabelOptions label_opt;
  auto* label = app.add_subcommand("label", "Project source spans onto functions");
  label->add_flag("--split", label_opt.split, "Also write group-atomic train/val/test splits");
  label->add_option("--fractions", label_opt.fractions, "train,val,test fractions")
      ->delimiter(',')
      ->expected(3);
  label->add_option("--group-key", label_opt.group_key, "package | report-id")->capture_default_str();

  auto* featurize = app.add_subcommand("featurize", "Tokenize functions into sparse count vectors");

  HyperOptions hyper_opt;
  auto add_hyper = [&](CLI::App* sub) {
    sub->add_option("--epochs", hyper_opt.epochs)->capture_default_str();
    sub->add_option("--lr", hyper_opt.lr)->capture_default_str();
    sub->add_option("--l2", hyper_opt.l2)->capture_default_str();
    sub->add_option("--batch-size", hyper_opt.batch_size, "0 = full batch")->capture_default_str();
    sub->add_flag("--no-class-balance", hyper_opt.no_class_balance);
  };
  auto* train = app.add_subcommand("train", "Train a scorer");
  add_hyper(train);
  train->add_option("--kind", hyper_opt.kind, "reference-linear | random | external-call | oracle")
      ->capture_default_str();
  auto* finetune = app.add_subcommand("finetune", "Fine-tune a reference scorer on a target corpus");
  add_hyper(finetune);

  auto* calibrate = app.add_subcommand("calibrate", "Choose the PAC threshold");

  std::string view = "unsafe";
  auto* evaluate_cmd = app.add_subcommand("evaluate", "Precision, recall, coverage and AUPRC");
  evaluate_cmd->add_option("--view", view, "unsafe | type:<j> | bug (curve.csv)")->capture_default_str();

  auto* propose = app.add_subcommand("propose", "Emit proposal sets and focus-function lists");

  GuaranteeOptions guarantee_opt;
  auto* verify = app.add_subcommand("verify-guarantee", "Simulate the recall guarantee");
  verify->add_option("--n-cal", guarantee_opt.n_cal)->check(CLI::PositiveNumber)->capture_default_str();
  verify->add_option("--trials", guarantee_opt.trials)->capture_default_str();
  verify->add_option("--exponent", guarantee_opt.exponent, "Score law P[U <= t] = t^exponent")
      ->capture_default_str();

  auto* stats = app.add_subcommand("stats", "Corpus statistics");

  SynthConfig synth_config;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic corpus with known labels");
  synth->add_option("--binaries", synth_config.binaries)->capture_default_str();
  synth->add_option("--functions-per-binary", synth_config.functions_per_binary)->capture_default_str();
  synth->add_option("--min-instructions", synth_config.min_instructions)->capture_default_str();
  synth->add_option("--max-instructions", synth_config.max_instructions)->capture_default_str();
  synth->add_option("--unsafe-rate", synth_config.unsafe_rate)->capture_default_str();
  synth->add_option("--bug-rate", synth_config.bug_rate)->capture_default_str();
  synth->add_option("--marker", synth_config.marker)->capture_default_str();
  synth->add_option("--marker-rate", synth_config.marker_rate)->capture_default_str();
  synth->add_option("--safe-marker-rate", synth_config.safe_marker_rate)->capture_default_str();
  synth->add_option("--decoy", synth_config.decoy)->capture_default_str();
  synth->add_option("--decoy-rate", synth_config.decoy_rate)->capture_default_str();
  synth->add_option("--package-prefix", synth_config.package_prefix)->capture_default_str();

  std::string outcomes;
  auto* fuzz = app.add_subcommand("analyze-fuzz", "Summarize paired fuzz-campaign outcomes");
  fuzz->add_option("--outcomes", outcomes, "fuzz_outcomes.jsonl")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  rc.features_given = depth_opt->count() > 0 || tokens_opt->count() > 0;
  try {
    parallel::set_jobs(rc.jobs);
    Sink sink(rc.out, out);
    if (*label) {
      cmd_label(rc, label_opt, sink);
    } else if (*featurize) {
      cmd_featurize(rc, sink);
    } else if (*train) {
      cmd_train(rc, hyper_opt, sink);
    } else if (*finetune) {
      cmd_finetune(rc, hyper_opt, sink);
    } else if (*calibrate) {
      cmd_calibrate(rc, sink);
    } else if (*evaluate_cmd) {
      cmd_evaluate(rc, view, sink, err);
    } else if (*propose) {
      cmd_propose(rc, sink);
    } else if (*verify) {
      cmd_verify(rc, guarantee_opt, sink);
    } else if (*stats) {
      cmd_stats(rc, sink);
    } else if (*synth) {
      cmd_synth(rc, synth_config, sink);
    } else if (*fuzz) {
      cmd_analyze_fuzz(outcomes, sink);
    }
    out.flush();
    return 0;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return e.kind() == ErrorKind::Validation ? 2 : 1;
  } catch (const json::exception& e) {
    err << "error: cli.MalformedInput: " << e.what() << "\n";
    return 2;
  } catch (const fs::filesystem_error& e) {
    err << "error: cli.IOError: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace unsafespot::cli
