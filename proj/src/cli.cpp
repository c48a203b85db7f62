#include "sedlab/cli.hpp"

#include "sedlab/csv.hpp"
#include "sedlab/experiment.hpp"
#include "sedlab/svg.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <optional>
#include <ostream>
#include <sstream>

namespace sedlab {

namespace fs = std::filesystem;

namespace {

struct CommonFlags {
  std::optional<std::string> config;
  std::optional<std::string> output_dir;
  std::optional<std::string> experiment_id;
  std::optional<std::uint64_t> seed;
  bool force = false;
};

struct ModelFlags {
  std::optional<std::size_t> d_model, layers, heads, max_seq_len;
};

struct DataFlags {
  std::optional<std::size_t> n;
  std::optional<std::vector<int>> difficulties;
  std::optional<std::vector<double>> template_mix;
};

struct SftFlags {
  std::optional<std::string> objective;
  std::optional<double> r, lambda, beta, lr;
  std::optional<std::size_t> k, batch_size, sample_size;
  std::optional<int> epochs;
  std::optional<std::string> optimizer, refresh, data;
};

struct RlFlags {
  std::optional<std::size_t> steps, group_size, batch_prompts, max_new, problems;
  std::optional<double> lr, temperature, kl;
  std::optional<std::string> optimizer;
};

struct EvalFlags {
  std::optional<std::size_t> k, problems, diversity_prompts, diversity_samples;
  std::optional<double> temperature;
};

struct AnalyzeFlags {
  std::vector<std::size_t> ks{1, 2, 3, 5};
  std::size_t examples = 256;
  std::size_t heatmap_examples = 32;
  bool svg = false;
};

const std::vector<std::string> objective_names{"ce", "sed", "sed-no-mask", "dft", "entropy-bonus"};

void add_common(CLI::App* app, CommonFlags& f) {
  app->add_option("--config", f.config, "JSON manifest to start from");
  app->add_option("--output-dir", f.output_dir, "Root for experiment directories (overrides SEDLAB_OUT)");
  app->add_option("--experiment-id", f.experiment_id, "Experiment directory name");
  app->add_option("--seed", f.seed, "Master seed");
  app->add_flag("--force", f.force, "Overwrite existing outputs");
}

void add_model(CLI::App* app, ModelFlags& f) {
  app->add_option("--d-model", f.d_model, "Model width");
  app->add_option("--layers", f.layers, "Transformer blocks");
  app->add_option("--heads", f.heads, "Attention heads");
  app->add_option("--max-seq-len", f.max_seq_len, "Context length");
}

void add_data(CLI::App* app, DataFlags& f) {
  app->add_option("--n", f.n, "Number of examples (required for gen-data unless --config is given)");
  app->add_option("--difficulty", f.difficulties, "Difficulties to draw from (1,2,3)")->delimiter(',');
  app->add_option("--template-mix", f.template_mix, "Four template weights summing to 1")->delimiter(',');
}

void add_sft(CLI::App* app, SftFlags& f, const std::string& prefix) {
  app->add_option("--objective", f.objective, "ce | sed | sed-no-mask | dft | entropy-bonus")
      ->check(CLI::IsMember(objective_names));
  app->add_option("--r", f.r, "Masking ratio in [0, 1]");
  app->add_option("--k", f.k, "Top-k for the exploration measure");
  app->add_option("--lambda", f.lambda, "Weight of the DE term");
  app->add_option("--beta", f.beta, "Entropy-bonus weight");
  app->add_option("--calibration-size", f.sample_size, "Calibration subset size");
  app->add_option("--refresh", f.refresh, "per_epoch | frozen_once")->check(CLI::IsMember({"per_epoch", "frozen_once"}));
  app->add_option("--epochs", f.epochs, "SFT epochs");
  app->add_option("--batch-size", f.batch_size, "SFT batch size");
  app->add_option("--" + prefix + "lr", f.lr, "SFT learning rate");
  app->add_option("--" + prefix + "optimizer", f.optimizer, "sgd | adam")->check(CLI::IsMember({"sgd", "adam"}));
  app->add_option("--data", f.data, "SFT data JSONL (default: generated from the manifest)");
}

void add_rl(CLI::App* app, RlFlags& f, const std::string& prefix) {
  app->add_option("--steps", f.steps, "GRPO steps");
  app->add_option("--group-size", f.group_size, "Rollouts per prompt");
  app->add_option("--batch-prompts", f.batch_prompts, "Prompts per step");
  app->add_option("--max-new", f.max_new, "Max completion tokens");
  app->add_option("--rl-problems", f.problems, "Size of the RL prompt pool");
  app->add_option("--" + prefix + "lr", f.lr, "RL learning rate");
  app->add_option("--" + prefix + "temperature", f.temperature, "Rollout temperature");
  app->add_option("--kl", f.kl, "KL-to-snapshot coefficient");
  app->add_option("--" + prefix + "optimizer", f.optimizer, "sgd | adam")->check(CLI::IsMember({"sgd", "adam"}));
}

void add_eval(CLI::App* app, EvalFlags& f, const std::string& temperature_name) {
  app->add_option("--avg-k", f.k, "Samples per problem for avg@k");
  app->add_option("--" + temperature_name, f.temperature, "Sampling temperature for avg@k");
  app->add_option("--eval-problems", f.problems, "Held-out problems");
  app->add_option("--diversity-prompts", f.diversity_prompts, "Prompts used for Self-BLEU");
  app->add_option("--diversity-samples", f.diversity_samples, "Samples per prompt for Self-BLEU");
}

void add_analyze(CLI::App* app, AnalyzeFlags& f) {
  app->add_option("--ks", f.ks, "Values of k for the exploration statistics")->delimiter(',');
  app->add_option("--examples", f.examples, "Examples for the exploration statistics");
  app->add_option("--heatmap-examples", f.heatmap_examples, "Examples in the label-probability heatmap");
  app->add_flag("--svg", f.svg, "Also render SVG plots");
}

template <class T>
void set_if(const std::optional<T>& v, T& target) {
  if (v) {
    target = *v;
  }
}

void apply(const ModelFlags& f, ExperimentManifest& m) {
  set_if(f.d_model, m.model.d_model);
  set_if(f.layers, m.model.n_layers);
  set_if(f.heads, m.model.n_heads);
  set_if(f.max_seq_len, m.model.max_seq_len);
}

void apply(const DataFlags& f, ExperimentManifest& m) {
  set_if(f.n, m.data.sft_examples);
  set_if(f.difficulties, m.data.sft_difficulties);
  set_if(f.template_mix, m.data.template_mix);
}

void apply(const SftFlags& f, ExperimentManifest& m) {
  if (f.objective) {
    m.sft.objective.kind = parse_objective_kind(*f.objective);
  }
  set_if(f.r, m.mask.r);
  set_if(f.k, m.mask.k);
  set_if(f.sample_size, m.mask.calibration_sample_size);
  if (f.refresh) {
    m.mask.refresh = *f.refresh == "per_epoch" ? MaskRefresh::per_epoch : MaskRefresh::frozen_once;
  }
  set_if(f.lambda, m.sft.objective.lambda);
  set_if(f.beta, m.sft.objective.beta);
  set_if(f.epochs, m.sft.epochs);
  set_if(f.batch_size, m.sft.batch_size);
  set_if(f.lr, m.sft.learning_rate);
  if (f.optimizer) {
    m.sft.optimizer = parse_optimizer_kind(*f.optimizer);
  }
  set_if(f.data, m.data.sft_path);
}

void apply(const RlFlags& f, ExperimentManifest& m) {
  set_if(f.steps, m.rl.steps);
  set_if(f.group_size, m.rl.group_size);
  set_if(f.batch_prompts, m.rl.batch_prompts);
  set_if(f.max_new, m.rl.max_new_tokens);
  set_if(f.problems, m.data.rl_problems);
  set_if(f.lr, m.rl.learning_rate);
  set_if(f.temperature, m.rl.temperature);
  set_if(f.kl, m.rl.kl_coeff);
  if (f.optimizer) {
    m.rl.optimizer = parse_optimizer_kind(*f.optimizer);
  }
}

void apply(const EvalFlags& f, ExperimentManifest& m) {
  set_if(f.k, m.eval.k);
  set_if(f.temperature, m.eval.temperature);
  set_if(f.problems, m.eval.eval_problems);
  set_if(f.diversity_prompts, m.eval.diversity_prompts);
  set_if(f.diversity_samples, m.eval.diversity_samples);
}

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw UsageError("cannot open " + path.string());
  }
  try {
    nlohmann::json j;
    in >> j;
    return j;
  } catch (const nlohmann::json::parse_error& e) {
    throw UsageError(path.string() + ": " + e.what());
  }
}

void write_json_file(const nlohmann::json& j, const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw std::runtime_error("cannot open for writing: " + path.string());
  }
  out << j.dump(2) << '\n';
}

// Precedence: flags > SEDLAB_OUT (output dir only) > --config > manifest
// already in the experiment directory > built-in defaults.
ExperimentManifest base_manifest(const CommonFlags& c) {
  std::optional<nlohmann::json> cfg;
  if (c.config) {
    cfg = read_json_file(*c.config);
  }
  ExperimentManifest m = ExperimentManifest::defaults();
  std::string output_dir = m.output_dir;
  std::string experiment_id = m.experiment_id;
  if (cfg) {
    output_dir = cfg->value("output_dir", output_dir);
    experiment_id = cfg->value("experiment_id", experiment_id);
  }
  if (const char* env = std::getenv("SEDLAB_OUT"); env && *env) {
    output_dir = env;
  }
  set_if(c.output_dir, output_dir);
  set_if(c.experiment_id, experiment_id);

  const fs::path existing = fs::path(output_dir) / experiment_id / "manifest.json";
  if (fs::exists(existing)) {
    from_json(read_json_file(existing), m);
  }
  if (cfg) {
    from_json(*cfg, m);
  }
  set_if(c.seed, m.master_seed);
  m.output_dir = output_dir;
  m.experiment_id = experiment_id;
  return m;
}

void finalize(ExperimentManifest& m) {
  m.resolve();
  m.validate();
}

class Outputs {
 public:
  Outputs(fs::path dir, bool force, std::ostream& out) : dir_(std::move(dir)), force_(force), out_(out) {}

  /// Refuses before any work is done if a target exists and --force is absent.
  void claim(std::initializer_list<std::string> names) const {
    for (const auto& n : names) {
      const fs::path p = dir_ / n;
      if (fs::exists(p) && !force_) {
        throw UsageError("refusing to overwrite " + p.string() + " (pass --force)");
      }
    }
  }

  fs::path path(const std::string& name) const { return dir_ / name; }

  void prepare() const { fs::create_directories(dir_); }

  void wrote(const std::string& name) const { out_ << "wrote " << (dir_ / name).string() << '\n'; }

  const fs::path& dir() const { return dir_; }

 private:
  fs::path dir_;
  bool force_;
  std::ostream& out_;
};

Model load_model(const fs::path& path) {
  if (!fs::exists(path)) {
    throw std::runtime_error("checkpoint not found: " + path.string());
  }
  return load_checkpoint(path);
}

nlohmann::json dataset_stats(const std::vector<LabeledExample>& data, const ExperimentManifest& m) {
  std::vector<std::size_t> templates(template_count, 0);
  std::map<std::string, std::size_t> difficulties;
  std::size_t chars = 0;
  std::set<std::string> prompts;
  for (const auto& ex : data) {
    ++templates[static_cast<std::size_t>(ex.template_id)];
    ++difficulties[std::to_string(ex.problem.difficulty)];
    chars += ex.label_text.size();
    prompts.insert(ex.problem.prompt_text);
  }
  return nlohmann::json{{"n", data.size()},
                        {"master_seed", m.master_seed},
                        {"data_seed", stream_seed(m.master_seed, SeedStream::sft_data)},
                        {"template_counts", templates},
                        {"difficulty_counts", difficulties},
                        {"distinct_prompts", prompts.size()},
                        {"mean_label_chars", data.empty() ? 0.0 : static_cast<double>(chars) / data.size()}};
}

// ---- stages shared by the individual commands and `run` ----

void stage_gen_data(const ExperimentManifest& m, const Outputs& o, const std::string& name) {
  const auto data = make_sft_data(m);
  write_jsonl(data, o.path(name + ".jsonl"));
  o.wrote(name + ".jsonl");
  write_json_file(dataset_stats(data, m), o.path(name + ".stats.json"));
  o.wrote(name + ".stats.json");
}

void stage_sft(const ExperimentManifest& m, const Outputs& o, std::ostream& out) {
  const auto data = make_sft_data(m);
  SftResult res = [&] {
    try {
      return train_sft(Model(m.model), data, m.sft);
    } catch (const TrainingError& e) {
      std::ostringstream msg;
      msg << e.what() << "; batch example indices:";
      for (std::size_t i : e.batch()) {
        msg << ' ' << i;
      }
      throw std::runtime_error(msg.str());
    }
  }();
  save_checkpoint(res.model, o.path("sft.ckpt"));
  o.wrote("sft.ckpt");
  write_train_log_csv(res.log, o.path("sft_log.csv"));
  o.wrote("sft_log.csv");
  if (!res.log.mask_plans.empty()) {
    write_json_file(nlohmann::json(res.log.mask_plans), o.path("mask_plans.json"));
    o.wrote("mask_plans.json");
  }
  const auto& last = res.log.records.back();
  out << "sft " << to_string(m.sft.objective.kind) << ": steps " << last.step << ", ce/token "
      << format_real(last.ce_term) << ", mean label prob " << format_real(last.mean_label_prob) << '\n';
}

void stage_rl(const ExperimentManifest& m, const Outputs& o, const fs::path& checkpoint, std::ostream& out) {
  Model model = load_model(checkpoint);
  const auto data = make_sft_data(m);
  const auto problems = make_rl_problems(m, data);
  RlResult res = train_rl(std::move(model), problems, m.rl);
  save_checkpoint(res.model, o.path("rl.ckpt"));
  o.wrote("rl.ckpt");
  write_rl_log_csv(res.log, o.path("rl_log.csv"));
  o.wrote("rl_log.csv");
  if (!res.log.empty()) {
    out << "rl: steps " << res.log.size() << ", final pass rate " << format_real(res.log.back().pass_rate) << '\n';
  }
}

void stage_eval(const ExperimentManifest& m, const Outputs& o, const std::string& stage, const fs::path& checkpoint,
                std::ostream& out) {
  const Model model = load_model(checkpoint);
  const auto data = make_sft_data(m);
  const auto rl_problems = make_rl_problems(m, data);
  const auto problems = make_eval_problems(m, data, rl_problems);
  const MetricsReport r = evaluate_model(model, problems, m.eval, stream_seed(m.master_seed, SeedStream::eval));
  write_metrics_json(r, o.path("metrics_" + stage + ".json"));
  o.wrote("metrics_" + stage + ".json");
  write_metrics_csv(r, o.path("metrics_" + stage + ".csv"));
  o.wrote("metrics_" + stage + ".csv");
  out << "eval " << stage << ": avg@" << r.k << " " << format_real(r.avg_at_k) << ", greedy "
      << format_real(r.greedy_accuracy) << ", self-bleu " << format_real(r.self_bleu) << ", entropy "
      << format_real(r.mean_token_entropy) << '\n';
}

void stage_analyze(const ExperimentManifest& m, const Outputs& o, const fs::path& checkpoint, const AnalyzeFlags& f) {
  if (f.ks.empty() || std::find(f.ks.begin(), f.ks.end(), std::size_t{0}) != f.ks.end()) {
    throw UsageError("--ks needs positive values");
  }
  const Model model = load_model(checkpoint);
  const auto data = make_sft_data(m);
  std::vector<LabeledExample> subset;
  for (std::size_t i : calibration_subset(data.size(), f.examples, m.sft.seed)) {
    subset.push_back(data[i]);
  }
  const auto stats = exploration_stats(model, Tokenizer{}, subset, f.ks);
  write_exploration_csv(stats, o.path("exploration_stats.csv"));
  o.wrote("exploration_stats.csv");

  const std::vector<LabeledExample> heat(data.begin(),
                                         data.begin() + static_cast<std::ptrdiff_t>(std::min(f.heatmap_examples, data.size())));
  const SftEval ev = eval_sft(model, heat);
  write_heatmap_csv(ev, o.path("heatmap.csv"));
  o.wrote("heatmap.csv");

  if (f.svg) {
    svg::Series med{"median", {}, {}}, q25{"q25", {}, {}}, q75{"q75", {}, {}};
    for (const auto& s : stats.per_k) {
      const double k = static_cast<double>(s.k);
      med.x.push_back(k), med.y.push_back(s.median);
      q25.x.push_back(k), q25.y.push_back(s.q25);
      q75.x.push_back(k), q75.y.push_back(s.q75);
    }
    svg::line_chart(o.path("exploration.svg"), "Cumulative top-k probability at label positions", {med, q25, q75},
                    "k", "P_top-k");
    o.wrote("exploration.svg");
    std::vector<std::vector<double>> rows;
    std::vector<std::vector<std::string>> labels;
    for (const auto& r : ev.rows) {
      if (r.position == 0) {
        rows.emplace_back();
        labels.emplace_back();
      }
      rows.back().push_back(r.label_prob);
      labels.back().push_back(r.label_char.size() == 1 ? r.label_char : std::string{});
    }
    svg::heatmap(o.path("heatmap.svg"), "Label probability per position", rows, labels);
    o.wrote("heatmap.svg");
  }
}

// ---- compare ----

struct CompareRow {
  std::string experiment;
  std::string objective;
  MetricsReport sft;
  std::optional<MetricsReport> rl;
};

std::string protocol_text(const MetricsReport& r) {
  std::ostringstream s;
  s << "avg-k " << r.k << ", temperature " << format_real(r.temperature) << ", eval problems " << r.eval_problems
    << ", diversity samples " << r.diversity_samples << " at temperature " << format_real(r.diversity_temperature);
  return s.str();
}

bool same_protocol(const MetricsReport& a, const MetricsReport& b) {
  return a.k == b.k && a.temperature == b.temperature && a.eval_problems == b.eval_problems &&
         a.diversity_samples == b.diversity_samples && a.diversity_temperature == b.diversity_temperature;
}

MetricsReport read_metrics(const fs::path& path) {
  MetricsReport r;
  from_json(read_json_file(path), r);
  return r;
}

void stage_compare(const std::vector<std::string>& dirs, const Outputs& o, std::ostream& out) {
  if (dirs.size() < 2) {
    throw UsageError("compare needs at least 2 experiment directories");
  }
  std::vector<CompareRow> rows;
  for (const auto& d : dirs) {
    const fs::path dir(d);
    if (!fs::exists(dir / "manifest.json") || !fs::exists(dir / "metrics_sft.json")) {
      throw std::runtime_error(d + " is not a completed experiment (manifest.json and metrics_sft.json required)");
    }
    CompareRow row;
    const ExperimentManifest m = read_manifest(dir / "manifest.json");
    row.experiment = m.experiment_id;
    row.objective = std::string(to_string(m.sft.objective.kind));
    row.sft = read_metrics(dir / "metrics_sft.json");
    if (fs::exists(dir / "metrics_rl.json")) {
      row.rl = read_metrics(dir / "metrics_rl.json");
    }
    rows.push_back(std::move(row));
  }
  const MetricsReport& ref = rows.front().sft;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (const MetricsReport* r : {&rows[i].sft, rows[i].rl ? &*rows[i].rl : nullptr}) {
      if (r && !same_protocol(ref, *r)) {
        throw UsageError("evaluation protocol mismatch: " + dirs[i] + " used " + protocol_text(*r) + " but " +
                         dirs[0] + " used " + protocol_text(ref));
      }
    }
  }

  const std::vector<std::string> header{"experiment", "objective", "sft_pass_rate", "rl_pass_rate", "self_bleu",
                                        "entropy"};
  std::vector<std::vector<std::string>> table;
  for (const auto& r : rows) {
    table.push_back({r.experiment, r.objective, format_real(r.sft.avg_at_k), r.rl ? format_real(r.rl->avg_at_k) : "NA",
                     format_real(r.sft.self_bleu), format_real(r.sft.mean_token_entropy)});
  }
  {
    CsvWriter csv(o.path("compare.csv"), {"experiment", "objective", "sft_pass_rate", "rl_pass_rate", "self_bleu",
                                          "entropy"});
    for (const auto& t : table) {
      csv.row(t[0], t[1], t[2], t[3], t[4], t[5]);
    }
  }
  o.wrote("compare.csv");

  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) {
    width[c] = header[c].size();
    for (const auto& t : table) {
      width[c] = std::max(width[c], t[c].size());
    }
  }
  std::ostringstream text;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      text << (c ? "  " : "") << std::left << std::setw(static_cast<int>(width[c])) << cells[c];
    }
    text << '\n';
  };
  line(header);
  for (const auto& t : table) {
    line(t);
  }
  text << "protocol: " << protocol_text(ref) << '\n';
  std::ofstream(o.path("compare.txt"), std::ios::binary | std::ios::trunc) << text.str();
  o.wrote("compare.txt");
  out << text.str();
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Supervised fine-tuning objectives and GRPO-lite experiments on a synthetic arithmetic task", "sedlab"};
  app.require_subcommand(1);

  CommonFlags common;
  ModelFlags model_flags;
  DataFlags data_flags;
  SftFlags sft_flags;
  RlFlags rl_flags;
  EvalFlags eval_flags;
  AnalyzeFlags analyze_flags;
  std::string data_name = "train";
  std::string stage = "sft";
  std::optional<std::string> checkpoint, prob_log;
  std::vector<std::string> compare_dirs;

  auto* gen = app.add_subcommand("gen-data", "Generate a labeled dataset (JSONL + stats sidecar)");
  add_common(gen, common);
  add_data(gen, data_flags);
  gen->add_option("--name", data_name, "Base name of the output files");

  auto* sft = app.add_subcommand("sft", "Supervised fine-tuning");
  add_common(sft, common);
  add_model(sft, model_flags);
  add_data(sft, data_flags);
  add_sft(sft, sft_flags, "");

  auto* cal = app.add_subcommand("calibrate", "Calibrate the mask threshold");
  add_common(cal, common);
  cal->add_option("--checkpoint", checkpoint, "Model checkpoint (default: <experiment>/sft.ckpt)");
  cal->add_option("--prob-log", prob_log, "Calibrate from a probability-log JSONL instead of a model");
  cal->add_option("--r", sft_flags.r, "Masking ratio in [0, 1]");
  cal->add_option("--k", sft_flags.k, "Top-k for the exploration measure");
  cal->add_option("--calibration-size", sft_flags.sample_size, "Calibration subset size");

  auto* rl = app.add_subcommand("rl", "GRPO-lite from an SFT checkpoint");
  add_common(rl, common);
  add_rl(rl, rl_flags, "");
  rl->add_option("--checkpoint", checkpoint, "Starting checkpoint (default: <experiment>/sft.ckpt)");

  auto* ev = app.add_subcommand("eval", "avg@k, greedy accuracy and diversity metrics");
  add_common(ev, common);
  add_eval(ev, eval_flags, "temperature");
  ev->add_option("--stage", stage, "sft | rl")->check(CLI::IsMember({"sft", "rl"}));
  ev->add_option("--checkpoint", checkpoint, "Checkpoint (default: <experiment>/<stage>.ckpt)");

  auto* an = app.add_subcommand("analyze", "Exploration statistics and label-probability heatmap");
  add_common(an, common);
  add_analyze(an, analyze_flags);
  an->add_option("--checkpoint", checkpoint, "Checkpoint (default: <experiment>/sft.ckpt)");

  auto* cmp = app.add_subcommand("compare", "Compare completed experiments");
  add_common(cmp, common);
  cmp->add_option("experiments", compare_dirs, "Experiment directories")->required();

  auto* run = app.add_subcommand("run", "Full pipeline: gen-data, sft, rl, eval, analyze");
  add_common(run, common);
  add_model(run, model_flags);
  add_data(run, data_flags);
  add_sft(run, sft_flags, "sft-");
  add_rl(run, rl_flags, "rl-");
  add_eval(run, eval_flags, "eval-temperature");
  add_analyze(run, analyze_flags);

  std::vector<const char*> argv{"sedlab"};
  for (const auto& a : args) {
    argv.push_back(a.c_str());
  }
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    ExperimentManifest m = base_manifest(common);
    const Outputs o(m.directory(), common.force, out);
    auto finish = [&] {
      write_manifest(m, o.path("manifest.json"));
      o.wrote("manifest.json");
    };

    if (gen->parsed()) {
      if (!data_flags.n && !common.config) {
        throw UsageError("gen-data: --n is required (or a --config providing data.sft_examples)");
      }
      apply(data_flags, m);
      m.data.sft_path.clear();
      finalize(m);
      o.claim({data_name + ".jsonl", data_name + ".stats.json"});
      o.prepare();
      stage_gen_data(m, o, data_name);
      finish();
    } else if (sft->parsed()) {
      apply(model_flags, m);
      apply(data_flags, m);
      apply(sft_flags, m);
      finalize(m);
      o.claim({"sft.ckpt", "sft_log.csv", "mask_plans.json"});
      o.prepare();
      stage_sft(m, o, out);
      finish();
    } else if (cal->parsed()) {
      apply(sft_flags, m);
      finalize(m);
      o.claim({"mask_plan.json"});
      MaskPlan plan;
      if (prob_log) {
        plan = calibrate_from_log(read_probability_log(*prob_log), m.mask);
      } else {
        const Model model = load_model(checkpoint ? fs::path(*checkpoint) : o.path("sft.ckpt"));
        const auto data = make_sft_data(m);
        std::vector<LabeledExample> subset;
        for (std::size_t i : calibration_subset(data.size(), m.mask.calibration_sample_size, m.sft.seed)) {
          subset.push_back(data[i]);
        }
        plan = run_calibration(model, Tokenizer{}, subset, m.mask);
      }
      o.prepare();
      write_json_file(nlohmann::json(plan), o.path("mask_plan.json"));
      o.wrote("mask_plan.json");
      out << "tau " << format_real(plan.tau) << ", DE applies to "
          << format_real(plan.calibration_stats.realized_de_fraction) << " of " << plan.calibration_stats.count
          << " positions\n";
      finish();
    } else if (rl->parsed()) {
      apply(rl_flags, m);
      finalize(m);
      o.claim({"rl.ckpt", "rl_log.csv"});
      const fs::path ckpt = checkpoint ? fs::path(*checkpoint) : o.path("sft.ckpt");
      o.prepare();
      stage_rl(m, o, ckpt, out);
      finish();
    } else if (ev->parsed()) {
      apply(eval_flags, m);
      finalize(m);
      o.claim({"metrics_" + stage + ".json", "metrics_" + stage + ".csv"});
      const fs::path ckpt = checkpoint ? fs::path(*checkpoint) : o.path(stage + ".ckpt");
      if (!fs::exists(ckpt)) {
        throw std::runtime_error("checkpoint not found: " + ckpt.string());
      }
      o.prepare();
      stage_eval(m, o, stage, ckpt, out);
      finish();
    } else if (an->parsed()) {
      finalize(m);
      o.claim({"exploration_stats.csv", "heatmap.csv", "exploration.svg", "heatmap.svg"});
      const fs::path ckpt = checkpoint ? fs::path(*checkpoint) : o.path("sft.ckpt");
      if (!fs::exists(ckpt)) {
        throw std::runtime_error("checkpoint not found: " + ckpt.string());
      }
      o.prepare();
      stage_analyze(m, o, ckpt, analyze_flags);
      finish();
    } else if (cmp->parsed()) {
      o.claim({"compare.csv", "compare.txt"});
      if (compare_dirs.size() < 2) {
        throw UsageError("compare needs at least 2 experiment directories");
      }
      o.prepare();
      stage_compare(compare_dirs, o, out);
    } else if (run->parsed()) {
      apply(model_flags, m);
      apply(data_flags, m);
      apply(sft_flags, m);
      apply(rl_flags, m);
      apply(eval_flags, m);
      finalize(m);
      const bool with_rl = m.rl.steps > 0;
      o.claim({"train.jsonl", "train.stats.json", "sft.ckpt", "sft_log.csv", "mask_plans.json", "rl.ckpt",
               "rl_log.csv", "metrics_sft.json", "metrics_sft.csv", "metrics_rl.json", "metrics_rl.csv",
               "exploration_stats.csv", "heatmap.csv", "exploration.svg", "heatmap.svg"});
      o.prepare();
      if (m.data.sft_path.empty()) {
        stage_gen_data(m, o, "train");
      }
      stage_sft(m, o, out);
      stage_eval(m, o, "sft", o.path("sft.ckpt"), out);
      if (with_rl) {
        stage_rl(m, o, o.path("sft.ckpt"), out);
        stage_eval(m, o, "rl", o.path("rl.ckpt"), out);
      }
      stage_analyze(m, o, o.path("sft.ckpt"), analyze_flags);
      finish();
    }
    return 0;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace sedlab
