#include "sedlab/tasks.hpp"

#include "sedlab/rng.hpp"

#include <json.hpp>

#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>

namespace sedlab {

namespace {

constexpr int max_operand = 99;

void check_difficulty(int difficulty) {
  if (difficulty < 1 || difficulty > 3) {
    throw ValidationError("difficulty must be one of {1, 2, 3}, got " + std::to_string(difficulty));
  }
}

std::string step(std::int64_t a, char op, std::int64_t b) {
  return std::to_string(a) + op + std::to_string(b);
}

std::int64_t apply(std::int64_t a, char op, std::int64_t b) { return op == '+' ? a + b : a - b; }

std::string join(const std::vector<std::int64_t>& xs, char sep) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) {
      out += sep;
    }
    out += std::to_string(xs[i]);
  }
  return out;
}

}  // namespace

Problem generate_problem(std::uint64_t seed, int difficulty) {
  check_difficulty(difficulty);
  Rng rng(seed);
  const int operands = difficulty + 1;
  Problem p;
  p.seed = seed;
  p.difficulty = difficulty;
  std::int64_t acc = static_cast<std::int64_t>(rng.uniform_int(max_operand + 1));
  p.prompt_text = std::to_string(acc);
  for (int i = 1; i < operands; ++i) {
    const char op = rng.uniform_int(2) == 0 ? '+' : '-';
    const auto b = static_cast<std::int64_t>(rng.uniform_int(max_operand + 1));
    p.prompt_text += op;
    p.prompt_text += std::to_string(b);
    acc = apply(acc, op, b);
  }
  p.prompt_text += '=';
  p.canonical_answer = acc;
  return p;
}

Expression parse_prompt(std::string_view text) {
  Expression e;
  if (text.empty() || text.back() != '=') {
    throw std::invalid_argument("parse_prompt: prompt must end with '='");
  }
  text.remove_suffix(1);
  std::size_t i = 0;
  auto read_number = [&]() {
    const std::size_t start = i;
    while (i < text.size() && text[i] >= '0' && text[i] <= '9') {
      ++i;
    }
    std::int64_t v = 0;
    auto res = std::from_chars(text.data() + start, text.data() + i, v);
    if (start == i || res.ec != std::errc{}) {
      throw std::invalid_argument("parse_prompt: malformed operand in \"" + std::string(text) + "\"");
    }
    return v;
  };
  e.operands.push_back(read_number());
  while (i < text.size()) {
    const char op = text[i++];
    if (op != '+' && op != '-') {
      throw std::invalid_argument("parse_prompt: unexpected character '" + std::string(1, op) + "'");
    }
    e.ops.push_back(op);
    e.operands.push_back(read_number());
  }
  return e;
}

std::string render_solution(const Problem& problem, int template_id, std::uint64_t seed) {
  if (template_id < 0 || template_id >= template_count) {
    throw std::invalid_argument("render_solution: template_id must be in [0, " + std::to_string(template_count) +
                                "), got " + std::to_string(template_id));
  }
  const Expression e = parse_prompt(problem.prompt_text);
  const auto& a = e.operands;
  const auto& ops = e.ops;
  std::string out;
  switch (template_id) {
    case 0: {
      std::int64_t acc = a[0];
      for (std::size_t i = 0; i < ops.size(); ++i) {
        const std::int64_t next = apply(acc, ops[i], a[i + 1]);
        out += (i ? ", " : "") + step(acc, ops[i], a[i + 1]) + "=" + std::to_string(next);
        acc = next;
      }
      break;
    }
    case 1: {
      std::vector<std::int64_t> pos{a[0]};
      std::vector<std::int64_t> neg;
      for (std::size_t i = 0; i < ops.size(); ++i) {
        (ops[i] == '+' ? pos : neg).push_back(a[i + 1]);
      }
      const std::int64_t sp = std::accumulate(pos.begin(), pos.end(), std::int64_t{0});
      const std::int64_t sn = std::accumulate(neg.begin(), neg.end(), std::int64_t{0});
      out = "p:" + join(pos, '+') + "=" + std::to_string(sp) + " n:" + (neg.empty() ? "0" : join(neg, '+')) +
            "=" + std::to_string(sn) + " " + step(sp, '-', sn) + "=" + std::to_string(sp - sn);
      break;
    }
    case 2: {
      std::int64_t acc = apply(a[0], ops[0], a[1]);
      for (std::size_t i = 1;; ++i) {
        out += std::to_string(acc);
        for (std::size_t j = i; j < ops.size(); ++j) {
          out += ops[j];
          out += std::to_string(a[j + 1]);
        }
        if (i >= ops.size()) {
          break;
        }
        out += '=';
        acc = apply(acc, ops[i], a[i + 1]);
      }
      break;
    }
    case 3: {
      Rng rng(seed);
      std::int64_t acc = a[0];
      for (std::size_t i = 0; i < ops.size(); ++i) {
        const std::int64_t next = apply(acc, ops[i], a[i + 1]);
        const char* verb = rng.uniform_int(2) == 0 ? " is " : " makes ";
        out += (i ? " " : "") + std::to_string(acc) + (ops[i] == '+' ? " plus " : " minus ") +
               std::to_string(a[i + 1]) + verb + std::to_string(next) + ".";
        acc = next;
      }
      break;
    }
  }
  out += ' ';
  out += answer_marker;
  out += std::to_string(problem.canonical_answer);
  return out;
}

std::optional<std::int64_t> extract_answer(std::string_view text) {
  const auto at = text.rfind(answer_marker);
  if (at == std::string_view::npos) {
    return std::nullopt;
  }
  std::string_view rest = text.substr(at + answer_marker.size());
  while (!rest.empty() && (rest.back() == ' ' || rest.back() == '\n')) {
    rest.remove_suffix(1);
  }
  if (rest.empty()) {
    return std::nullopt;
  }
  const std::size_t digits_from = rest.front() == '-' ? 1 : 0;
  if (rest.size() == digits_from) {
    return std::nullopt;
  }
  for (std::size_t i = digits_from; i < rest.size(); ++i) {
    if (rest[i] < '0' || rest[i] > '9') {
      return std::nullopt;
    }
  }
  std::int64_t v = 0;
  auto res = std::from_chars(rest.data(), rest.data() + rest.size(), v);
  if (res.ec != std::errc{} || res.ptr != rest.data() + rest.size()) {
    return std::nullopt;
  }
  return v;
}

int verify(std::string_view completion, const Problem& problem) {
  const auto got = extract_answer(completion);
  return got && *got == problem.canonical_answer ? 1 : 0;
}

Tokenizer::Tokenizer() : alphabet_("0123456789+-=#:,. \nabcdefghijklmnopqrstuvwxyz"), index_(256, -1) {
  for (std::size_t i = 0; i < alphabet_.size(); ++i) {
    index_[static_cast<unsigned char>(alphabet_[i])] = static_cast<int>(i + 3);
  }
}

bool Tokenizer::supports(std::string_view text) const noexcept {
  for (char c : text) {
    if (index_[static_cast<unsigned char>(c)] < 0) {
      return false;
    }
  }
  return true;
}

std::vector<TokenId> Tokenizer::tokenize(std::string_view text) const {
  std::vector<TokenId> ids;
  ids.reserve(text.size());
  for (char c : text) {
    const int id = index_[static_cast<unsigned char>(c)];
    if (id < 0) {
      throw std::invalid_argument("tokenize: character outside the alphabet: code " +
                                  std::to_string(static_cast<int>(static_cast<unsigned char>(c))));
    }
    ids.push_back(static_cast<TokenId>(id));
  }
  return ids;
}

std::string Tokenizer::detokenize(std::span<const TokenId> ids) const {
  std::string out;
  out.reserve(ids.size());
  for (TokenId id : ids) {
    if (id >= 3 && id < vocab_size()) {
      out += alphabet_[id - 3];
    }
  }
  return out;
}

std::string Tokenizer::token_name(TokenId id) const {
  switch (id) {
    case pad: return "<pad>";
    case bos: return "<bos>";
    case eos: return "<eos>";
    default: break;
  }
  if (id < vocab_size()) {
    const char c = alphabet_[id - 3];
    if (c == ' ') {
      return "<sp>";
    }
    if (c == '\n') {
      return "<nl>";
    }
    return std::string(1, c);
  }
  return "<unk>";
}

EncodedExample encode_example(const Tokenizer& tok, const LabeledExample& ex) {
  std::vector<TokenId> seq{Tokenizer::bos};
  const auto prompt = tok.tokenize(ex.problem.prompt_text);
  const auto label = tok.tokenize(ex.label_text);
  seq.insert(seq.end(), prompt.begin(), prompt.end());
  seq.insert(seq.end(), label.begin(), label.end());
  seq.push_back(Tokenizer::eos);
  EncodedExample enc;
  enc.inputs.assign(seq.begin(), seq.end() - 1);
  enc.targets.assign(seq.begin() + 1, seq.end());
  enc.label_start = prompt.size();
  enc.label_count = label.size() + 1;
  return enc;
}

std::vector<TokenId> encode_prompt(const Tokenizer& tok, const Problem& problem) {
  std::vector<TokenId> seq{Tokenizer::bos};
  const auto prompt = tok.tokenize(problem.prompt_text);
  seq.insert(seq.end(), prompt.begin(), prompt.end());
  return seq;
}

std::vector<LabeledExample> build_sft_dataset(const DatasetSpec& spec) {
  if (spec.n == 0) {
    throw ValidationError("build_sft_dataset: n must be positive");
  }
  if (spec.template_mix.size() != static_cast<std::size_t>(template_count)) {
    throw ValidationError("build_sft_dataset: template_mix needs " + std::to_string(template_count) + " weights");
  }
  double total = 0.0;
  for (double w : spec.template_mix) {
    if (w < 0.0 || !std::isfinite(w)) {
      throw ValidationError("build_sft_dataset: template weights must be finite and non-negative");
    }
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw ValidationError("build_sft_dataset: template_mix must sum to 1");
  }
  if (spec.difficulties.empty()) {
    throw ValidationError("build_sft_dataset: at least one difficulty required");
  }
  for (int d : spec.difficulties) {
    check_difficulty(d);
  }
  std::vector<LabeledExample> out;
  out.reserve(spec.n);
  for (std::size_t i = 0; i < spec.n; ++i) {
    const std::uint64_t s = mix_seed(spec.seed, i);
    Rng rng(s);
    const int difficulty = spec.difficulties[rng.uniform_int(spec.difficulties.size())];
    const int tmpl = static_cast<int>(rng.weighted(spec.template_mix));
    LabeledExample ex;
    ex.problem = generate_problem(mix_seed(s, 1), difficulty);
    ex.template_id = tmpl;
    ex.label_text = render_solution(ex.problem, tmpl, mix_seed(s, 2));
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<Problem> build_problems(std::size_t n, std::span<const int> difficulties, std::uint64_t seed) {
  if (difficulties.empty()) {
    throw ValidationError("build_problems: at least one difficulty required");
  }
  for (int d : difficulties) {
    check_difficulty(d);
  }
  std::vector<Problem> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t s = mix_seed(seed, i);
    Rng rng(s);
    const int difficulty = difficulties[rng.uniform_int(difficulties.size())];
    out.push_back(generate_problem(mix_seed(s, 1), difficulty));
  }
  return out;
}

void write_jsonl(const std::vector<LabeledExample>& examples, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw std::runtime_error("cannot open for writing: " + path.string());
  }
  for (const auto& ex : examples) {
    nlohmann::ordered_json j;
    j["prompt"] = ex.problem.prompt_text;
    j["label"] = ex.label_text;
    j["answer"] = ex.problem.canonical_answer;
    j["template_id"] = ex.template_id;
    j["difficulty"] = ex.problem.difficulty;
    j["seed"] = ex.problem.seed;
    out << j.dump() << '\n';
  }
  if (!out) {
    throw std::runtime_error("failed writing " + path.string());
  }
}

std::vector<LabeledExample> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("cannot open dataset: " + path.string());
  }
  std::vector<LabeledExample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) {
      continue;
    }
    try {
      const auto j = nlohmann::json::parse(line);
      LabeledExample ex;
      ex.problem.prompt_text = j.at("prompt").get<std::string>();
      ex.label_text = j.at("label").get<std::string>();
      ex.problem.canonical_answer = j.at("answer").get<std::int64_t>();
      ex.template_id = j.at("template_id").get<int>();
      ex.problem.difficulty = j.at("difficulty").get<int>();
      ex.problem.seed = j.at("seed").get<std::uint64_t>();
      out.push_back(std::move(ex));
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": malformed JSONL record: " +
                               e.what());
    }
  }
  return out;
}

std::vector<ProbabilityRecord> read_probability_log(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("cannot open probability log: " + path.string());
  }
  std::vector<ProbabilityRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) {
      continue;
    }
    try {
      const auto j = nlohmann::json::parse(line);
      ProbabilityRecord r;
      r.position = j.at("position").get<std::size_t>();
      r.label_prob = j.at("label_prob").get<double>();
      r.topk_probs = j.at("topk_probs").get<std::vector<double>>();
      if (r.topk_probs.empty()) {
        throw std::runtime_error("topk_probs is empty");
      }
      out.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": malformed probability record: " +
                               e.what());
    }
  }
  return out;
}

}  // namespace sedlab
