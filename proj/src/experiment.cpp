#include "sedlab/experiment.hpp"

#include "sedlab/rng.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace sedlab {

ExperimentManifest ExperimentManifest::defaults() {
  ExperimentManifest m;
  m.model.d_model = 64;
  m.model.n_layers = 2;
  m.model.n_heads = 4;
  m.model.max_seq_len = 128;
  m.sft.epochs = 8;
  m.sft.batch_size = 8;
  m.sft.learning_rate = 2e-3;
  m.sft.optimizer = OptimizerKind::adam;
  m.sft.log_every = 1;
  m.rl.learning_rate = 1e-3;
  m.rl.optimizer = OptimizerKind::adam;
  m.resolve();
  return m;
}

std::uint64_t stream_seed(std::uint64_t master, SeedStream stream) {
  return mix_seed(master, static_cast<std::uint64_t>(stream));
}

void ExperimentManifest::resolve() {
  model.vocab_size = Tokenizer{}.vocab_size();
  model.seed = stream_seed(master_seed, SeedStream::model);
  sft.seed = stream_seed(master_seed, SeedStream::sft);
  rl.seed = stream_seed(master_seed, SeedStream::rl);
  if (sft.objective.kind == ObjectiveKind::sed_sft) {
    sft.mask_config = mask;
  } else {
    sft.mask_config.reset();
  }
}

namespace {

void check_difficulties(const std::vector<int>& ds, const char* field) {
  if (ds.empty()) {
    throw UsageError(std::string(field) + ": at least one difficulty required");
  }
  for (int d : ds) {
    if (d < 1 || d > 3) {
      throw UsageError(std::string(field) + ": difficulty " + std::to_string(d) + " must be one of {1, 2, 3}");
    }
  }
}

template <class F>
void rethrow_as_usage(const char* what, F&& f) {
  try {
    f();
  } catch (const UsageError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string(what) + ": " + e.what());
  }
}

}  // namespace

void ExperimentManifest::validate() const {
  if (experiment_id.empty() || experiment_id.find_first_of("/\\") != std::string::npos || experiment_id == "." ||
      experiment_id == "..") {
    throw UsageError("experiment_id must be a plain non-empty name, got '" + experiment_id + "'");
  }
  if (output_dir.empty()) {
    throw UsageError("output_dir must not be empty");
  }
  rethrow_as_usage("model", [&] { model.validate(); });
  rethrow_as_usage("sft", [&] { sft.validate(); });
  rethrow_as_usage("rl", [&] { rl.validate(); });
  rethrow_as_usage("mask", [&] { mask.validate(); });
  if (data.sft_examples == 0 && data.sft_path.empty()) {
    throw UsageError("data.sft_examples must be positive");
  }
  if (data.template_mix.size() != static_cast<std::size_t>(template_count)) {
    throw UsageError("data.template_mix needs " + std::to_string(template_count) + " weights");
  }
  const double mix_sum = std::accumulate(data.template_mix.begin(), data.template_mix.end(), 0.0);
  if (std::any_of(data.template_mix.begin(), data.template_mix.end(), [](double w) { return !(w >= 0.0); }) ||
      std::abs(mix_sum - 1.0) > 1e-9) {
    throw UsageError("data.template_mix must be non-negative and sum to 1");
  }
  check_difficulties(data.sft_difficulties, "data.sft_difficulties");
  check_difficulties(data.rl_difficulties, "data.rl_difficulties");
  check_difficulties(eval.difficulties, "eval.difficulties");
  if (rl.steps > 0 && data.rl_problems == 0) {
    throw UsageError("data.rl_problems must be positive when rl.steps > 0");
  }
  if (eval.k == 0 || eval.eval_problems == 0) {
    throw UsageError("eval.k and eval.eval_problems must be positive");
  }
  if (!(eval.temperature >= 0.0) || !(eval.diversity_temperature >= 0.0)) {
    throw UsageError("eval temperatures must be >= 0");
  }
  if (eval.diversity_prompts > eval.eval_problems) {
    throw UsageError("eval.diversity_prompts must not exceed eval.eval_problems");
  }
  if (eval.diversity_prompts > 0 && eval.diversity_samples < 2) {
    throw UsageError("eval.diversity_samples must be >= 2");
  }
  if (eval.max_new_tokens == 0) {
    throw UsageError("eval.max_new_tokens must be positive");
  }
}

void to_json(nlohmann::json& j, const DataConfig& c) {
  j = nlohmann::json{{"sft_examples", c.sft_examples},       {"template_mix", c.template_mix},
                     {"sft_difficulties", c.sft_difficulties}, {"rl_problems", c.rl_problems},
                     {"rl_difficulties", c.rl_difficulties},   {"sft_path", c.sft_path}};
}

void from_json(const nlohmann::json& j, DataConfig& c) {
  c.sft_examples = j.value("sft_examples", c.sft_examples);
  c.template_mix = j.value("template_mix", c.template_mix);
  c.sft_difficulties = j.value("sft_difficulties", c.sft_difficulties);
  c.rl_problems = j.value("rl_problems", c.rl_problems);
  c.rl_difficulties = j.value("rl_difficulties", c.rl_difficulties);
  c.sft_path = j.value("sft_path", c.sft_path);
}

void to_json(nlohmann::json& j, const EvalProtocol& c) {
  j = nlohmann::json{{"k", c.k},
                     {"temperature", c.temperature},
                     {"eval_problems", c.eval_problems},
                     {"difficulties", c.difficulties},
                     {"diversity_prompts", c.diversity_prompts},
                     {"diversity_samples", c.diversity_samples},
                     {"diversity_temperature", c.diversity_temperature},
                     {"max_new_tokens", c.max_new_tokens}};
}

void from_json(const nlohmann::json& j, EvalProtocol& c) {
  c.k = j.value("k", c.k);
  c.temperature = j.value("temperature", c.temperature);
  c.eval_problems = j.value("eval_problems", c.eval_problems);
  c.difficulties = j.value("difficulties", c.difficulties);
  c.diversity_prompts = j.value("diversity_prompts", c.diversity_prompts);
  c.diversity_samples = j.value("diversity_samples", c.diversity_samples);
  c.diversity_temperature = j.value("diversity_temperature", c.diversity_temperature);
  c.max_new_tokens = j.value("max_new_tokens", c.max_new_tokens);
}

void to_json(nlohmann::json& j, const ExperimentManifest& m) {
  nlohmann::json sft = m.sft;
  sft.erase("mask");  // the manifest carries one mask config
  j = nlohmann::json{{"experiment_id", m.experiment_id},
                     {"master_seed", m.master_seed},
                     {"model", m.model},
                     {"sft", sft},
                     {"rl", m.rl},
                     {"mask", m.mask},
                     {"data", m.data},
                     {"eval", m.eval},
                     {"output_dir", m.output_dir}};
}

void from_json(const nlohmann::json& j, ExperimentManifest& m) {
  if (!j.is_object()) {
    throw UsageError("manifest must be a JSON object");
  }
  try {
    m.experiment_id = j.value("experiment_id", m.experiment_id);
    m.master_seed = j.value("master_seed", m.master_seed);
    m.output_dir = j.value("output_dir", m.output_dir);
    if (j.contains("model")) from_json(j.at("model"), m.model);
    if (j.contains("sft")) {
      nlohmann::json sft = j.at("sft");
      sft.erase("mask");
      from_json(sft, m.sft);
    }
    if (j.contains("rl")) from_json(j.at("rl"), m.rl);
    if (j.contains("mask")) from_json(j.at("mask"), m.mask);
    if (j.contains("data")) from_json(j.at("data"), m.data);
    if (j.contains("eval")) from_json(j.at("eval"), m.eval);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("manifest: ") + e.what());
  } catch (const UsageError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("manifest: ") + e.what());
  }
}

ExperimentManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("cannot open manifest " + path.string());
  }
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw UsageError(path.string() + ": " + e.what());
  }
  ExperimentManifest m = ExperimentManifest::defaults();
  from_json(j, m);
  return m;
}

void write_manifest(const ExperimentManifest& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw std::runtime_error("cannot open for writing: " + path.string());
  }
  out << nlohmann::json(m).dump(2) << '\n';
}

std::vector<LabeledExample> make_sft_data(const ExperimentManifest& m) {
  if (!m.data.sft_path.empty()) {
    return read_jsonl(m.data.sft_path);
  }
  DatasetSpec spec;
  spec.n = m.data.sft_examples;
  spec.template_mix = m.data.template_mix;
  spec.difficulties = m.data.sft_difficulties;
  spec.seed = stream_seed(m.master_seed, SeedStream::sft_data);
  return build_sft_dataset(spec);
}

namespace {

std::vector<Problem> fresh_problems(std::size_t n, const std::vector<int>& difficulties, std::uint64_t seed,
                                    const std::set<std::string>& taken) {
  std::vector<Problem> out;
  std::size_t pool = 2 * n + 64;
  for (int attempt = 0; attempt < 8 && out.size() < n; ++attempt, pool *= 2) {
    out.clear();
    std::set<std::string> seen = taken;
    for (auto& p : build_problems(pool, difficulties, seed)) {
      if (seen.insert(p.prompt_text).second) {
        out.push_back(std::move(p));
        if (out.size() == n) {
          break;
        }
      }
    }
  }
  if (out.size() < n) {
    throw UsageError("cannot draw " + std::to_string(n) + " distinct unseen problems at the requested difficulties");
  }
  return out;
}

}  // namespace

std::vector<Problem> make_rl_problems(const ExperimentManifest& m, const std::vector<LabeledExample>& sft_data) {
  std::set<std::string> taken;
  for (const auto& ex : sft_data) {
    taken.insert(ex.problem.prompt_text);
  }
  return fresh_problems(m.data.rl_problems, m.data.rl_difficulties, stream_seed(m.master_seed, SeedStream::rl_problems),
                        taken);
}

std::vector<Problem> make_eval_problems(const ExperimentManifest& m, const std::vector<LabeledExample>& sft_data,
                                        const std::vector<Problem>& rl_problems) {
  std::set<std::string> taken;
  for (const auto& ex : sft_data) {
    taken.insert(ex.problem.prompt_text);
  }
  for (const auto& p : rl_problems) {
    taken.insert(p.prompt_text);
  }
  return fresh_problems(m.eval.eval_problems, m.eval.difficulties, stream_seed(m.master_seed, SeedStream::held_out),
                        taken);
}

MetricsReport evaluate_model(const Model& model, const std::vector<Problem>& problems, const EvalProtocol& protocol,
                             std::uint64_t seed, const Tokenizer& tok) {
  if (problems.empty()) {
    throw std::invalid_argument("evaluate_model: no problems");
  }
  MetricsReport r;
  r.k = protocol.k;
  r.temperature = protocol.temperature;
  r.eval_problems = problems.size();
  r.diversity_samples = protocol.diversity_samples;
  r.diversity_temperature = protocol.diversity_temperature;

  const std::uint64_t pass_seed = mix_seed(seed, 1);
  const std::uint64_t div_seed = mix_seed(seed, 2);
  std::vector<std::vector<bool>> passes;
  std::size_t greedy_ok = 0;
  for (std::size_t i = 0; i < problems.size(); ++i) {
    const auto prompt = encode_prompt(tok, problems[i]);
    const std::size_t max_new = std::min(protocol.max_new_tokens, model.config().max_seq_len - prompt.size());
    std::vector<bool> row;
    for (std::size_t s = 0; s < protocol.k; ++s) {
      const auto out = sample(model, prompt, protocol.temperature, max_new, Tokenizer::eos,
                              mix_seed(mix_seed(pass_seed, i), s));
      row.push_back(verify(tok.detokenize(out), problems[i]) == 1);
    }
    passes.push_back(std::move(row));
    greedy_ok += static_cast<std::size_t>(
        verify(tok.detokenize(sample(model, prompt, 0.0, max_new, Tokenizer::eos, 0)), problems[i]));
  }
  r.avg_at_k = avg_at_k(passes);
  r.greedy_accuracy = static_cast<double>(greedy_ok) / static_cast<double>(problems.size());

  std::vector<Sentence> all;
  double bleu_sum = 0.0;
  double entropy_sum = 0.0;
  std::size_t tokens = 0;
  const std::size_t prompts = std::min(protocol.diversity_prompts, problems.size());
  for (std::size_t i = 0; i < prompts; ++i) {
    const auto prompt = encode_prompt(tok, problems[i]);
    const std::size_t max_new = std::min(protocol.max_new_tokens, model.config().max_seq_len - prompt.size());
    std::vector<Sentence> corpus;
    for (std::size_t s = 0; s < protocol.diversity_samples; ++s) {
      const auto trace = sample_trace(model, prompt, protocol.diversity_temperature, max_new, Tokenizer::eos,
                                      mix_seed(mix_seed(div_seed, i), s));
      entropy_sum += std::accumulate(trace.entropies.begin(), trace.entropies.end(), 0.0);
      tokens += trace.entropies.size();
      corpus.push_back(words(tok.detokenize(trace.tokens)));
    }
    bleu_sum += self_bleu(corpus);
    all.insert(all.end(), corpus.begin(), corpus.end());
  }
  r.sample_count = all.size();
  if (prompts > 0) {
    r.self_bleu = bleu_sum / static_cast<double>(prompts);
    r.distinct_1 = distinct_n(all, 1);
    r.distinct_2 = distinct_n(all, 2);
    r.mean_token_entropy = tokens ? entropy_sum / static_cast<double>(tokens) : 0.0;
  }
  r.validate();
  return r;
}

PipelineResult run_pipeline(const ExperimentManifest& manifest, const Tokenizer& tok) {
  ExperimentManifest m = manifest;
  m.resolve();
  m.validate();
  const auto data = make_sft_data(m);
  const auto rl_problems = make_rl_problems(m, data);
  const auto eval_problems = make_eval_problems(m, data, rl_problems);
  const std::uint64_t eval_seed = stream_seed(m.master_seed, SeedStream::eval);

  PipelineResult out{train_sft(Model(m.model), data, m.sft, tok), std::nullopt, {}, std::nullopt};
  out.sft_metrics = evaluate_model(out.sft.model, eval_problems, m.eval, eval_seed, tok);
  if (m.rl.steps > 0) {
    out.rl = train_rl(out.sft.model, rl_problems, m.rl, false, tok);
    out.rl_metrics = evaluate_model(out.rl->model, eval_problems, m.eval, eval_seed, tok);
  }
  return out;
}

}  // namespace sedlab
