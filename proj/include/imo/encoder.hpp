#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "imo/autodiff.hpp"
#include "imo/tensor.hpp"

namespace imo {

struct EncoderConfig {
  int vocab_size = 200;
  int d_model = 64;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 128;
  int max_len = 64;
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// Pre-layernorm residual block: x + Attn(LN(x)), then x + FFN(LN(x)).
struct TransformerLayer {
  Parameter ln1_gain, ln1_bias;
  Parameter wq, bq, wk, bk, wv, bv, wo, bo;
  Parameter ln2_gain, ln2_bias;
  Parameter w1, b1, w2, b2;

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
};

/// Per-layer outputs of one encoder pass. `hidden[l]` is H^{l+1};
/// `masked[l]` is E^{l+1} when that layer was masked (otherwise == hidden[l]).
struct EncodeTrace {
  std::vector<ad::Var> hidden;
  std::vector<ad::Var> masked;
};

class Encoder {
 public:
  Encoder() = default;
  /// Token and positional tables and all weights ~ N(0, 0.02); layernorm 1/0;
  /// biases 0. Reproducible from `config.seed`.
  explicit Encoder(const EncoderConfig& config);

  const EncoderConfig& config() const { return config_; }

  /// Runs all layers. `masks[l]`, when set, multiplies H^{l+1} elementwise.
  /// With `masked_feeds_forward` the masked states are the next layer's input;
  /// otherwise the next layer consumes the raw states.
  EncodeTrace encode(ad::Tape& tape, const std::vector<int>& tokens,
                     const std::vector<std::optional<ad::Var>>& masks,
                     bool masked_feeds_forward = true);

  void check_tokens(const std::vector<int>& tokens) const;

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;

  Parameter token_embedding;
  Parameter position_embedding;
  std::vector<TransformerLayer> layers;

 private:
  ad::Var layer_forward(ad::Tape& tape, TransformerLayer& layer, ad::Var x);

  EncoderConfig config_;
};

}  // namespace imo
