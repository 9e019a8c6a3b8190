#include "imo/encoder.hpp"

#include <cmath>
#include <string>

#include "imo/errors.hpp"
#include "imo/rng.hpp"

namespace imo {

namespace {

constexpr double kInitStd = 0.02;

Parameter normal_param(const std::string& name, Shape shape, Rng& rng) {
  return Parameter(name, normal_tensor(std::move(shape), 0.0, kInitStd, rng));
}

Parameter const_param(const std::string& name, Shape shape, double v) {
  return Parameter(name, Tensor(std::move(shape), v));
}

}  // namespace

void EncoderConfig::validate() const {
  auto positive = [](int v, const char* field) {
    if (v < 1) throw ConfigError(std::string("encoder.") + field, "must be >= 1");
  };
  positive(vocab_size, "vocab_size");
  positive(d_model, "d_model");
  positive(n_layers, "n_layers");
  positive(n_heads, "n_heads");
  positive(d_ff, "d_ff");
  positive(max_len, "max_len");
  if (d_model % n_heads != 0) {
    throw ConfigError("encoder.n_heads", "d_model " + std::to_string(d_model) +
                                             " is not divisible by n_heads " +
                                             std::to_string(n_heads));
  }
}

std::vector<Parameter*> TransformerLayer::parameters() {
  return {&ln1_gain, &ln1_bias, &wq, &bq,       &wk,       &bk, &wv, &bv,
          &wo,       &bo,       &ln2_gain, &ln2_bias, &w1, &b1, &w2, &b2};
}

std::vector<const Parameter*> TransformerLayer::parameters() const {
  auto ps = const_cast<TransformerLayer*>(this)->parameters();
  return {ps.begin(), ps.end()};
}

Encoder::Encoder(const EncoderConfig& config) : config_(config) {
  config_.validate();
  const auto v = static_cast<std::size_t>(config.vocab_size);
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto f = static_cast<std::size_t>(config.d_ff);
  const auto t = static_cast<std::size_t>(config.max_len);
  Rng rng(derive_seed(config.seed, 1));

  token_embedding = normal_param("encoder.token_embedding", {v, d}, rng);
  position_embedding = normal_param("encoder.position_embedding", {t, d}, rng);
  for (int l = 0; l < config.n_layers; ++l) {
    const std::string p = "encoder.layers." + std::to_string(l) + ".";
    TransformerLayer layer;
    layer.ln1_gain = const_param(p + "ln1.gain", {d}, 1.0);
    layer.ln1_bias = const_param(p + "ln1.bias", {d}, 0.0);
    layer.wq = normal_param(p + "attn.wq", {d, d}, rng);
    layer.bq = const_param(p + "attn.bq", {d}, 0.0);
    layer.wk = normal_param(p + "attn.wk", {d, d}, rng);
    layer.bk = const_param(p + "attn.bk", {d}, 0.0);
    layer.wv = normal_param(p + "attn.wv", {d, d}, rng);
    layer.bv = const_param(p + "attn.bv", {d}, 0.0);
    layer.wo = normal_param(p + "attn.wo", {d, d}, rng);
    layer.bo = const_param(p + "attn.bo", {d}, 0.0);
    layer.ln2_gain = const_param(p + "ln2.gain", {d}, 1.0);
    layer.ln2_bias = const_param(p + "ln2.bias", {d}, 0.0);
    layer.w1 = normal_param(p + "ffn.w1", {d, f}, rng);
    layer.b1 = const_param(p + "ffn.b1", {f}, 0.0);
    layer.w2 = normal_param(p + "ffn.w2", {f, d}, rng);
    layer.b2 = const_param(p + "ffn.b2", {d}, 0.0);
    layers.push_back(std::move(layer));
  }
}

void Encoder::check_tokens(const std::vector<int>& tokens) const {
  if (tokens.empty()) throw InputError("encode: empty token sequence");
  if (tokens.size() > static_cast<std::size_t>(config_.max_len)) {
    throw InputError("encode: sequence length " + std::to_string(tokens.size()) +
                     " exceeds max_len " + std::to_string(config_.max_len));
  }
  for (int id : tokens) {
    if (id < 0 || id >= config_.vocab_size) {
      throw InputError("encode: token id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(config_.vocab_size));
    }
  }
}

ad::Var Encoder::layer_forward(ad::Tape& tape, TransformerLayer& layer, ad::Var x) {
  const auto d = static_cast<std::size_t>(config_.d_model);
  const auto heads = static_cast<std::size_t>(config_.n_heads);
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  ad::Var y = ad::layernorm(x, tape.param(layer.ln1_gain), tape.param(layer.ln1_bias));
  ad::Var q = ad::add(ad::matmul(y, tape.param(layer.wq)), tape.param(layer.bq));
  ad::Var k = ad::add(ad::matmul(y, tape.param(layer.wk)), tape.param(layer.bk));
  ad::Var v = ad::add(ad::matmul(y, tape.param(layer.wv)), tape.param(layer.bv));
  std::vector<ad::Var> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    ad::Var qh = heads == 1 ? q : ad::slice_cols(q, h * dh, dh);
    ad::Var kh = heads == 1 ? k : ad::slice_cols(k, h * dh, dh);
    ad::Var vh = heads == 1 ? v : ad::slice_cols(v, h * dh, dh);
    ad::Var scores = ad::scale(ad::matmul_nt(qh, kh), inv_sqrt);
    outs.push_back(ad::matmul(ad::softmax(scores), vh));
  }
  ad::Var attn = heads == 1 ? outs.front() : ad::concat(outs);
  x = ad::add(x, ad::add(ad::matmul(attn, tape.param(layer.wo)), tape.param(layer.bo)));

  ad::Var y2 = ad::layernorm(x, tape.param(layer.ln2_gain), tape.param(layer.ln2_bias));
  ad::Var hidden = ad::relu(ad::add(ad::matmul(y2, tape.param(layer.w1)), tape.param(layer.b1)));
  ad::Var ffn = ad::add(ad::matmul(hidden, tape.param(layer.w2)), tape.param(layer.b2));
  return ad::add(x, ffn);
}

EncodeTrace Encoder::encode(ad::Tape& tape, const std::vector<int>& tokens,
                            const std::vector<std::optional<ad::Var>>& masks,
                            bool masked_feeds_forward) {
  check_tokens(tokens);
  if (masks.size() > layers.size()) {
    throw ContractError("encode: " + std::to_string(masks.size()) + " masks for " +
                        std::to_string(layers.size()) + " layers");
  }
  std::vector<int> positions(tokens.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);

  ad::Var x = ad::add(ad::gather(tape.param(token_embedding), tokens),
                      ad::gather(tape.param(position_embedding), positions));
  EncodeTrace trace;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    ad::Var h = layer_forward(tape, layers[l], x);
    ad::Var e = h;
    if (l < masks.size() && masks[l]) {
      if (masks[l]->value().size() != static_cast<std::size_t>(config_.d_model)) {
        throw ContractError("apply_mask: width mismatch " + shape_string(h.value().shape) +
                            " vs " + shape_string(masks[l]->value().shape));
      }
      e = ad::mul(h, *masks[l]);
    }
    trace.hidden.push_back(h);
    trace.masked.push_back(e);
    x = masked_feeds_forward ? e : h;
  }
  return trace;
}

std::vector<Parameter*> Encoder::parameters() {
  std::vector<Parameter*> out{&token_embedding, &position_embedding};
  for (auto& layer : layers) {
    for (Parameter* p : layer.parameters()) out.push_back(p);
  }
  return out;
}

std::vector<const Parameter*> Encoder::parameters() const {
  auto ps = const_cast<Encoder*>(this)->parameters();
  return {ps.begin(), ps.end()};
}

}  // namespace imo
