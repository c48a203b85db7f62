#pragma once

#include "sedlab/autodiff.hpp"

#include <json.hpp>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace sedlab {

using TokenId = std::uint32_t;

struct ModelConfig {
  std::size_t vocab_size = 64;
  std::size_t d_model = 128;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t max_seq_len = 256;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument on zero sizes or d_model % n_heads != 0.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
/// Missing keys keep their defaults.
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Next-token distribution at one input position.
struct TokenDistribution {
  std::size_t position = 0;
  std::vector<double> probs;
  /// The token that actually follows this position, when known.
  std::optional<TokenId> label_id;
  double label_prob = 0.0;
};

struct NamedParameter {
  std::string name;
  ad::Var var;
};

/// Tiny pre-LayerNorm decoder-only transformer with learned absolute
/// positional embeddings and a GELU MLP. Copies are deep.
class Model {
 public:
  /// Deterministic initialization from config.seed.
  explicit Model(ModelConfig config);

  Model(const Model& other);
  Model& operator=(const Model& other);
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const ModelConfig& config() const noexcept { return config_; }

  /// Parameters in declaration order (the checkpoint order).
  std::span<const NamedParameter> parameters() const noexcept { return params_; }
  std::span<NamedParameter> mutable_parameters() noexcept { return params_; }
  const ad::Var& parameter(std::string_view name) const;
  std::size_t parameter_count() const noexcept;

  void zero_grad();

  /// Differentiable logits, one row per input position: [T x vocab].
  ad::Var logits(std::span<const TokenId> tokens) const;

  /// Expected parameter names and shapes for a config, in declaration order.
  static std::vector<std::pair<std::string, ad::Shape>> layout(const ModelConfig& config);

 private:
  struct LayerRefs {
    std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_in, b_in, w_out, b_out;
  };
  friend class Decoder;

  void index_layers();
  const ad::Array& value(std::size_t i) const { return params_[i].var.value(); }
  void check_tokens(std::span<const TokenId> tokens) const;

  ModelConfig config_;
  std::vector<NamedParameter> params_;
  std::vector<LayerRefs> layers_;
  std::size_t tok_emb_ = 0, pos_emb_ = 0, lnf_g_ = 0, lnf_b_ = 0, head_w_ = 0, head_b_ = 0;
};

Model init_model(const ModelConfig& config);

/// Incremental (cached) inference over a read-only model. Each push() feeds
/// one token and returns the next-token logits at that position.
class Decoder {
 public:
  explicit Decoder(const Model& model);

  std::span<const double> push(TokenId token);
  std::size_t length() const noexcept { return length_; }
  std::size_t capacity() const noexcept { return model_->config().max_seq_len; }

 private:
  const Model* model_;
  std::size_t length_ = 0;
  std::vector<std::vector<double>> keys_;    // per layer, [max_seq_len x d]
  std::vector<std::vector<double>> values_;  // per layer, [max_seq_len x d]
  std::vector<double> logits_;
};

/// Softmax of logits / temperature (temperature > 0) with max subtraction.
std::vector<double> softmax(std::span<const double> logits, double temperature = 1.0);

/// One distribution per input position predicting the following token.
/// Throws std::invalid_argument on empty/overlong input or out-of-range ids.
std::vector<TokenDistribution> forward(const Model& model, std::span<const TokenId> tokens);

struct SampleTrace {
  std::vector<TokenId> tokens;
  /// log pi(token) under the untempered model distribution.
  std::vector<double> logprobs;
  /// Entropy (nats) of the untempered distribution at each sampled step.
  std::vector<double> entropies;
};

/// Appends up to max_new tokens after the prompt, stopping after stop_id.
/// Temperature 0 is greedy argmax with ties broken by the lowest id.
SampleTrace sample_trace(const Model& model, std::span<const TokenId> prompt, double temperature,
                         std::size_t max_new, TokenId stop_id, std::uint64_t seed);

std::vector<TokenId> sample(const Model& model, std::span<const TokenId> prompt, double temperature,
                            std::size_t max_new, TokenId stop_id, std::uint64_t seed);

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { io, version_mismatch, shape_mismatch, corrupt };
  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

inline constexpr int checkpoint_format_version = 1;

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace sedlab
