#include "sedlab/model.hpp"

#include "sedlab/csv.hpp"
#include "sedlab/rng.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace sedlab {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatMap = Eigen::Map<const RowMat>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using ConstRowVecMap = Eigen::Map<const RowVec>;
using RowVecMap = Eigen::Map<RowVec>;

constexpr double layer_norm_eps = 1e-5;
constexpr double init_std = 0.02;

ConstMatMap as_matrix(const ad::Array& a) {
  return ConstMatMap(a.data().data(), static_cast<Eigen::Index>(a.rows()),
                     static_cast<Eigen::Index>(a.cols()));
}

// Same arithmetic order as ad::layer_norm.
void layer_norm_inplace(std::span<const double> x, const ad::Array& gain, const ad::Array& bias,
                        std::span<double> out) {
  const std::size_t n = x.size();
  double mu = 0.0;
  for (double v : x) {
    mu += v;
  }
  mu /= static_cast<double>(n);
  double var = 0.0;
  for (double v : x) {
    var += (v - mu) * (v - mu);
  }
  var /= static_cast<double>(n);
  const double rstd = 1.0 / std::sqrt(var + layer_norm_eps);
  for (std::size_t c = 0; c < n; ++c) {
    out[c] = (x[c] - mu) * rstd * gain[c] + bias[c];
  }
}

double gelu_scalar(double x) {
  constexpr double c = 0.7978845608028654;
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || max_seq_len == 0) {
    throw std::invalid_argument("ModelConfig: vocab_size, d_model, n_layers, n_heads and max_seq_len must be positive");
  }
  if (d_model % n_heads != 0) {
    throw std::invalid_argument("ModelConfig: d_model (" + std::to_string(d_model) +
                                ") must be divisible by n_heads (" + std::to_string(n_heads) + ")");
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},     {"n_layers", c.n_layers},
                     {"n_heads", c.n_heads},       {"max_seq_len", c.max_seq_len}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.d_model = j.value("d_model", c.d_model);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  c.seed = j.value("seed", c.seed);
}

std::vector<std::pair<std::string, ad::Shape>> Model::layout(const ModelConfig& c) {
  const std::size_t d = c.d_model;
  std::vector<std::pair<std::string, ad::Shape>> out;
  out.emplace_back("tok_emb", ad::Shape{c.vocab_size, d});
  out.emplace_back("pos_emb", ad::Shape{c.max_seq_len, d});
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    out.emplace_back(p + "ln1.g", ad::Shape{d});
    out.emplace_back(p + "ln1.b", ad::Shape{d});
    out.emplace_back(p + "attn.w_qkv", ad::Shape{d, 3 * d});
    out.emplace_back(p + "attn.b_qkv", ad::Shape{3 * d});
    out.emplace_back(p + "attn.w_out", ad::Shape{d, d});
    out.emplace_back(p + "attn.b_out", ad::Shape{d});
    out.emplace_back(p + "ln2.g", ad::Shape{d});
    out.emplace_back(p + "ln2.b", ad::Shape{d});
    out.emplace_back(p + "mlp.w_in", ad::Shape{d, 4 * d});
    out.emplace_back(p + "mlp.b_in", ad::Shape{4 * d});
    out.emplace_back(p + "mlp.w_out", ad::Shape{4 * d, d});
    out.emplace_back(p + "mlp.b_out", ad::Shape{d});
  }
  out.emplace_back("ln_f.g", ad::Shape{d});
  out.emplace_back("ln_f.b", ad::Shape{d});
  out.emplace_back("head.w", ad::Shape{d, c.vocab_size});
  out.emplace_back("head.b", ad::Shape{c.vocab_size});
  return out;
}

Model::Model(ModelConfig config) : config_(config) {
  config_.validate();
  Rng rng(mix_seed(config_.seed, 0x6d6f64656cULL));
  // Residual-branch output projections get the depth-scaled std.
  const double resid_std = init_std / std::sqrt(2.0 * static_cast<double>(config_.n_layers));
  for (auto& [name, shape] : layout(config_)) {
    ad::Array a(shape, 0.0);
    const bool is_gain = name.ends_with(".g");
    const bool is_bias = name.ends_with(".b") || name.find(".b_") != std::string::npos;
    if (is_gain) {
      a.fill(1.0);
    } else if (!is_bias) {
      const double sd = (name.ends_with("attn.w_out") || name.ends_with("mlp.w_out")) ? resid_std : init_std;
      for (auto& v : a.data()) {
        v = sd * rng.normal();
      }
    }
    params_.push_back({name, ad::parameter(std::move(a))});
  }
  index_layers();
}

Model::Model(const Model& other) : config_(other.config_), layers_(other.layers_) {
  params_.reserve(other.params_.size());
  for (const auto& p : other.params_) {
    params_.push_back({p.name, ad::parameter(p.var.value())});
  }
  tok_emb_ = other.tok_emb_;
  pos_emb_ = other.pos_emb_;
  lnf_g_ = other.lnf_g_;
  lnf_b_ = other.lnf_b_;
  head_w_ = other.head_w_;
  head_b_ = other.head_b_;
}

Model& Model::operator=(const Model& other) {
  if (this != &other) {
    Model copy(other);
    *this = std::move(copy);
  }
  return *this;
}

void Model::index_layers() {
  auto find = [&](const std::string& name) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (params_[i].name == name) {
        return i;
      }
    }
    throw std::logic_error("Model: missing parameter " + name);
  };
  tok_emb_ = find("tok_emb");
  pos_emb_ = find("pos_emb");
  lnf_g_ = find("ln_f.g");
  lnf_b_ = find("ln_f.b");
  head_w_ = find("head.w");
  head_b_ = find("head.b");
  layers_.clear();
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    layers_.push_back({find(p + "ln1.g"), find(p + "ln1.b"), find(p + "attn.w_qkv"), find(p + "attn.b_qkv"),
                       find(p + "attn.w_out"), find(p + "attn.b_out"), find(p + "ln2.g"), find(p + "ln2.b"),
                       find(p + "mlp.w_in"), find(p + "mlp.b_in"), find(p + "mlp.w_out"), find(p + "mlp.b_out")});
  }
}

const ad::Var& Model::parameter(std::string_view name) const {
  for (const auto& p : params_) {
    if (p.name == name) {
      return p.var;
    }
  }
  throw std::out_of_range("Model: no parameter named " + std::string(name));
}

std::size_t Model::parameter_count() const noexcept {
  std::size_t n = 0;
  for (const auto& p : params_) {
    n += p.var.value().size();
  }
  return n;
}

void Model::zero_grad() {
  for (auto& p : params_) {
    p.var.zero_grad();
  }
}

void Model::check_tokens(std::span<const TokenId> tokens) const {
  if (tokens.empty()) {
    throw std::invalid_argument("forward: empty token sequence");
  }
  if (tokens.size() > config_.max_seq_len) {
    throw std::invalid_argument("forward: sequence length " + std::to_string(tokens.size()) +
                                " exceeds max_seq_len " + std::to_string(config_.max_seq_len));
  }
  for (TokenId t : tokens) {
    if (t >= config_.vocab_size) {
      throw std::invalid_argument("forward: token id " + std::to_string(t) + " out of range for vocab " +
                                  std::to_string(config_.vocab_size));
    }
  }
}

ad::Var Model::logits(std::span<const TokenId> tokens) const {
  check_tokens(tokens);
  const std::size_t t = tokens.size();
  const std::size_t d = config_.d_model;
  const std::size_t hd = d / config_.n_heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<std::size_t> ids(tokens.begin(), tokens.end());
  std::vector<std::size_t> pos(t);
  for (std::size_t i = 0; i < t; ++i) {
    pos[i] = i;
  }
  const auto& P = params_;
  ad::Var x = ad::add(ad::gather_rows(P[tok_emb_].var, ids), ad::gather_rows(P[pos_emb_].var, pos));
  std::vector<ad::Var> heads(config_.n_heads);
  for (const auto& L : layers_) {
    ad::Var h = ad::layer_norm(x, P[L.ln1_g].var, P[L.ln1_b].var, layer_norm_eps);
    ad::Var qkv = ad::add_row(ad::matmul(h, P[L.w_qkv].var), P[L.b_qkv].var);
    for (std::size_t k = 0; k < config_.n_heads; ++k) {
      ad::Var q = ad::slice_cols(qkv, k * hd, hd);
      ad::Var kk = ad::slice_cols(qkv, d + k * hd, hd);
      ad::Var v = ad::slice_cols(qkv, 2 * d + k * hd, hd);
      ad::Var att = ad::causal_softmax_rows(ad::scale(ad::matmul(q, ad::transpose(kk)), att_scale));
      heads[k] = ad::matmul(att, v);
    }
    ad::Var attn = ad::add_row(ad::matmul(ad::concat_cols(heads), P[L.w_o].var), P[L.b_o].var);
    x = ad::add(x, attn);
    ad::Var h2 = ad::layer_norm(x, P[L.ln2_g].var, P[L.ln2_b].var, layer_norm_eps);
    ad::Var m = ad::gelu(ad::add_row(ad::matmul(h2, P[L.w_in].var), P[L.b_in].var));
    x = ad::add(x, ad::add_row(ad::matmul(m, P[L.w_out].var), P[L.b_out].var));
  }
  ad::Var xf = ad::layer_norm(x, P[lnf_g_].var, P[lnf_b_].var, layer_norm_eps);
  return ad::add_row(ad::matmul(xf, P[head_w_].var), P[head_b_].var);
}

Model init_model(const ModelConfig& config) { return Model(config); }

Decoder::Decoder(const Model& model) : model_(&model) {
  const auto& c = model.config();
  keys_.assign(c.n_layers, std::vector<double>(c.max_seq_len * c.d_model, 0.0));
  values_.assign(c.n_layers, std::vector<double>(c.max_seq_len * c.d_model, 0.0));
  logits_.assign(c.vocab_size, 0.0);
}

std::span<const double> Decoder::push(TokenId token) {
  const Model& m = *model_;
  const auto& c = m.config();
  if (length_ >= c.max_seq_len) {
    throw std::invalid_argument("Decoder: sequence length exceeds max_seq_len " + std::to_string(c.max_seq_len));
  }
  if (token >= c.vocab_size) {
    throw std::invalid_argument("Decoder: token id " + std::to_string(token) + " out of range");
  }
  const std::size_t d = c.d_model;
  const std::size_t hd = d / c.n_heads;
  const std::size_t pos = length_;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));

  std::vector<double> x(d), h(d), qkv(3 * d), cat(d), tmp(d), mlp(4 * d), scores(pos + 1);
  const ad::Array& tok = m.value(m.tok_emb_);
  const ad::Array& pe = m.value(m.pos_emb_);
  for (std::size_t i = 0; i < d; ++i) {
    x[i] = tok[token * d + i] + pe[pos * d + i];
  }
  for (std::size_t l = 0; l < m.layers_.size(); ++l) {
    const auto& L = m.layers_[l];
    layer_norm_inplace(x, m.value(L.ln1_g), m.value(L.ln1_b), h);
    RowVecMap(qkv.data(), static_cast<Eigen::Index>(3 * d)).noalias() =
        ConstRowVecMap(h.data(), static_cast<Eigen::Index>(d)) * as_matrix(m.value(L.w_qkv));
    const ad::Array& bqkv = m.value(L.b_qkv);
    for (std::size_t i = 0; i < 3 * d; ++i) {
      qkv[i] += bqkv[i];
    }
    std::copy_n(qkv.begin() + static_cast<std::ptrdiff_t>(d), d, keys_[l].begin() + static_cast<std::ptrdiff_t>(pos * d));
    std::copy_n(qkv.begin() + static_cast<std::ptrdiff_t>(2 * d), d,
                values_[l].begin() + static_cast<std::ptrdiff_t>(pos * d));
    for (std::size_t k = 0; k < c.n_heads; ++k) {
      const double* q = qkv.data() + k * hd;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j <= pos; ++j) {
        const double* kj = keys_[l].data() + j * d + k * hd;
        double dot = 0.0;
        for (std::size_t e = 0; e < hd; ++e) {
          dot += q[e] * kj[e];
        }
        scores[j] = dot * att_scale;
        mx = std::max(mx, scores[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j <= pos; ++j) {
        scores[j] = std::exp(scores[j] - mx);
        z += scores[j];
      }
      for (std::size_t e = 0; e < hd; ++e) {
        cat[k * hd + e] = 0.0;
      }
      for (std::size_t j = 0; j <= pos; ++j) {
        const double a = scores[j] / z;
        const double* vj = values_[l].data() + j * d + k * hd;
        for (std::size_t e = 0; e < hd; ++e) {
          cat[k * hd + e] += a * vj[e];
        }
      }
    }
    RowVecMap(tmp.data(), static_cast<Eigen::Index>(d)).noalias() =
        ConstRowVecMap(cat.data(), static_cast<Eigen::Index>(d)) * as_matrix(m.value(L.w_o));
    const ad::Array& bo = m.value(L.b_o);
    for (std::size_t i = 0; i < d; ++i) {
      x[i] += tmp[i] + bo[i];
    }
    layer_norm_inplace(x, m.value(L.ln2_g), m.value(L.ln2_b), h);
    RowVecMap(mlp.data(), static_cast<Eigen::Index>(4 * d)).noalias() =
        ConstRowVecMap(h.data(), static_cast<Eigen::Index>(d)) * as_matrix(m.value(L.w_in));
    const ad::Array& bin = m.value(L.b_in);
    for (std::size_t i = 0; i < 4 * d; ++i) {
      mlp[i] = gelu_scalar(mlp[i] + bin[i]);
    }
    RowVecMap(tmp.data(), static_cast<Eigen::Index>(d)).noalias() =
        ConstRowVecMap(mlp.data(), static_cast<Eigen::Index>(4 * d)) * as_matrix(m.value(L.w_out));
    const ad::Array& bout = m.value(L.b_out);
    for (std::size_t i = 0; i < d; ++i) {
      x[i] += tmp[i] + bout[i];
    }
  }
  layer_norm_inplace(x, m.value(m.lnf_g_), m.value(m.lnf_b_), h);
  RowVecMap(logits_.data(), static_cast<Eigen::Index>(c.vocab_size)).noalias() =
      ConstRowVecMap(h.data(), static_cast<Eigen::Index>(d)) * as_matrix(m.value(m.head_w_));
  const ad::Array& hb = m.value(m.head_b_);
  for (std::size_t i = 0; i < c.vocab_size; ++i) {
    logits_[i] += hb[i];
  }
  ++length_;
  return logits_;
}

std::vector<double> softmax(std::span<const double> logits, double temperature) {
  if (!(temperature > 0.0)) {
    throw std::invalid_argument("softmax: temperature must be positive");
  }
  std::vector<double> out(logits.size());
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp((logits[i] - mx) / temperature);
    z += out[i];
  }
  for (auto& v : out) {
    v /= z;
  }
  return out;
}

std::vector<TokenDistribution> forward(const Model& model, std::span<const TokenId> tokens) {
  if (tokens.empty()) {
    throw std::invalid_argument("forward: empty token sequence");
  }
  if (tokens.size() > model.config().max_seq_len) {
    throw std::invalid_argument("forward: sequence length " + std::to_string(tokens.size()) +
                                " exceeds max_seq_len " + std::to_string(model.config().max_seq_len));
  }
  for (TokenId t : tokens) {
    if (t >= model.config().vocab_size) {
      throw std::invalid_argument("forward: token id " + std::to_string(t) + " out of vocabulary");
    }
  }
  Decoder dec(model);
  std::vector<TokenDistribution> out;
  out.reserve(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    TokenDistribution td;
    td.position = i;
    td.probs = softmax(dec.push(tokens[i]));
    if (i + 1 < tokens.size()) {
      td.label_id = tokens[i + 1];
      td.label_prob = td.probs.at(tokens[i + 1]);
    }
    out.push_back(std::move(td));
  }
  return out;
}

SampleTrace sample_trace(const Model& model, std::span<const TokenId> prompt, double temperature,
                         std::size_t max_new, TokenId stop_id, std::uint64_t seed) {
  if (prompt.empty() || prompt.size() > model.config().max_seq_len) {
    throw std::invalid_argument("sample: prompt must be non-empty and fit in max_seq_len");
  }
  if (temperature < 0.0 || !std::isfinite(temperature)) {
    throw std::invalid_argument("sample: temperature must be finite and >= 0");
  }
  Decoder dec(model);
  std::span<const double> logits;
  for (TokenId t : prompt) {
    logits = dec.push(t);
  }
  Rng rng(seed);
  SampleTrace trace;
  while (trace.tokens.size() < max_new) {
    const std::vector<double> probs = softmax(logits);
    std::size_t choice = 0;
    if (temperature == 0.0) {
      for (std::size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > logits[choice]) {
          choice = i;
        }
      }
    } else {
      const std::vector<double> tempered = temperature == 1.0 ? probs : softmax(logits, temperature);
      choice = rng.weighted(tempered);
    }
    double entropy = 0.0;
    for (double p : probs) {
      if (p > 0.0) {
        entropy -= p * std::log(p);
      }
    }
    trace.tokens.push_back(static_cast<TokenId>(choice));
    trace.logprobs.push_back(std::log(probs[choice]));
    trace.entropies.push_back(entropy);
    if (choice == stop_id || dec.length() + 1 >= dec.capacity()) {
      break;
    }
    logits = dec.push(static_cast<TokenId>(choice));
  }
  return trace;
}

std::vector<TokenId> sample(const Model& model, std::span<const TokenId> prompt, double temperature,
                            std::size_t max_new, TokenId stop_id, std::uint64_t seed) {
  return sample_trace(model, prompt, temperature, max_new, stop_id, seed).tokens;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  nlohmann::json meta;
  meta["format"] = "sedlab-checkpoint";
  meta["format_version"] = checkpoint_format_version;
  meta["config"] = model.config();
  nlohmann::json params = nlohmann::json::array();
  std::size_t total = 0;
  for (const auto& p : model.parameters()) {
    params.push_back({{"name", p.name}, {"shape", p.var.shape()}});
    total += p.var.value().size();
  }
  meta["parameters"] = params;

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw CheckpointError(CheckpointError::Kind::io, "cannot open checkpoint for writing: " + path.string());
  }
  out << meta.dump() << '\n';
  for (const auto& p : model.parameters()) {
    out << p.name;
    for (double v : p.var.value().data()) {
      out << ' ' << format_real(v);
    }
    out << '\n';
  }
  out << "end " << total << '\n';
  if (!out) {
    throw CheckpointError(CheckpointError::Kind::io, "failed writing checkpoint: " + path.string());
  }
}

Model load_checkpoint(const std::filesystem::path& path) {
  using Kind = CheckpointError::Kind;
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw CheckpointError(Kind::io, "checkpoint not found or unreadable: " + path.string());
  }
  std::string line;
  if (!std::getline(in, line)) {
    throw CheckpointError(Kind::corrupt, "checkpoint is empty: " + path.string());
  }
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Kind::corrupt, std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  if (!meta.is_object() || meta.value("format", std::string{}) != "sedlab-checkpoint" ||
      !meta.contains("format_version") || !meta["format_version"].is_number_integer()) {
    throw CheckpointError(Kind::corrupt, "checkpoint header lacks format identification");
  }
  const int version = meta["format_version"].get<int>();
  if (version != checkpoint_format_version) {
    throw CheckpointError(Kind::version_mismatch, "checkpoint format_version " + std::to_string(version) +
                                                      " is not supported (expected " +
                                                      std::to_string(checkpoint_format_version) + ")");
  }
  ModelConfig config;
  try {
    config = meta.at("config").get<ModelConfig>();
    config.validate();
  } catch (const std::exception& e) {
    throw CheckpointError(Kind::corrupt, std::string("checkpoint config invalid: ") + e.what());
  }
  const auto expected = Model::layout(config);
  const auto& declared = meta.value("parameters", nlohmann::json::array());
  if (!declared.is_array() || declared.size() != expected.size()) {
    throw CheckpointError(Kind::shape_mismatch, "checkpoint declares " + std::to_string(declared.size()) +
                                                    " parameters, config implies " +
                                                    std::to_string(expected.size()));
  }
  for (std::size_t i = 0; i < expected.size(); ++i) {
    ad::Shape shape;
    std::string name;
    try {
      name = declared[i].at("name").get<std::string>();
      shape = declared[i].at("shape").get<ad::Shape>();
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError(Kind::corrupt, std::string("checkpoint parameter entry malformed: ") + e.what());
    }
    if (name != expected[i].first || shape != expected[i].second) {
      throw CheckpointError(Kind::shape_mismatch, "parameter " + name + " " + ad::shape_str(shape) +
                                                      " does not match expected " + expected[i].first + " " +
                                                      ad::shape_str(expected[i].second));
    }
  }

  Model model(config);
  std::size_t total = 0;
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (!std::getline(in, line)) {
      throw CheckpointError(Kind::corrupt, "checkpoint truncated before parameter " + expected[i].first);
    }
    const char* p = line.data();
    const char* end = line.data() + line.size();
    const std::string& name = expected[i].first;
    if (line.compare(0, name.size(), name) != 0) {
      throw CheckpointError(Kind::corrupt, "expected parameter line " + name);
    }
    p += name.size();
    ad::Array& values = model.mutable_parameters()[i].var.mutable_value();
    for (std::size_t k = 0; k < values.size(); ++k) {
      if (p == end || *p != ' ') {
        throw CheckpointError(Kind::corrupt, "parameter " + name + " has too few values");
      }
      ++p;
      double v = 0.0;
      auto res = std::from_chars(p, end, v);
      if (res.ec != std::errc{}) {
        throw CheckpointError(Kind::corrupt, "parameter " + name + " has a malformed value");
      }
      values[k] = v;
      p = res.ptr;
    }
    if (p != end) {
      throw CheckpointError(Kind::corrupt, "parameter " + name + " has too many values");
    }
    total += values.size();
  }
  if (!std::getline(in, line) || line != "end " + std::to_string(total)) {
    throw CheckpointError(Kind::corrupt, "checkpoint end marker missing or wrong");
  }
  return model;
}

}  // namespace sedlab
