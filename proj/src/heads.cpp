#include "imo/heads.hpp"

#include <optional>
#include <string>

#include "imo/errors.hpp"
#include "imo/log.hpp"

namespace imo {

namespace {

constexpr double kInitStd = 0.02;

void require_states(const ad::Var& states, std::size_t width, const char* op) {
  const Tensor& h = states.value();
  if (h.rank() != 2 || h.shape[0] == 0) throw InputError(std::string(op) + ": empty sequence");
  if (h.shape[1] != width) {
    throw ContractError(std::string(op) + ": width mismatch " + shape_string(h.shape) + " vs [" +
                        std::to_string(width) + "]");
  }
}

struct Pooled {
  ad::Var v;  // [1 x d]
  std::optional<ad::Var> attention;
};

/// Aggregates rows of `values` [T x d] weighted by attention from `keys` and `query`.
Pooled pool(ad::Tape& tape, ad::Var keys, ad::Var values, ad::Var query,
            const HeadOptions& options) {
  const std::size_t t = keys.value().shape[0];
  const std::size_t d = keys.value().shape[1];
  if (options.pooling == Pooling::Mean) {
    ad::Var ones = tape.constant(Tensor({1, t}, 1.0 / static_cast<double>(t)));
    return {ad::matmul(ones, values), std::nullopt};
  }
  ad::Var a = ad::reshape(ad::matmul(keys, ad::reshape(query, {d, 1})), {t});
  if (options.normalize_attention) a = ad::softmax(a);
  ad::Var v = ad::matmul(ad::reshape(a, {1, t}), values);
  return {v, a};
}

}  // namespace

BinaryHead::BinaryHead(std::size_t width, std::size_t n_labels, Rng& rng)
    : projection("head.projection", normal_tensor({width, n_labels}, 0.0, kInitStd, rng)) {}

MultiClassHead::MultiClassHead(std::size_t width, std::size_t n_labels, Rng& rng) {
  for (std::size_t y = 0; y < n_labels; ++y) {
    projections.emplace_back("head.projections." + std::to_string(y),
                             normal_tensor({width}, 0.0, kInitStd, rng));
  }
}

HeadOutput binary_forward(ad::Tape& tape, ad::Var masked_states, ad::Var query, BinaryHead& head,
                          const HeadOptions& options) {
  const std::size_t d = head.projection.value.shape[0];
  require_states(masked_states, d, "binary_forward");
  if (query.value().size() != d) {
    throw ContractError("binary_forward: query width mismatch " +
                        shape_string(query.value().shape) + " vs [" + std::to_string(d) + "]");
  }
  Pooled pooled = pool(tape, masked_states, masked_states, query, options);
  ad::Var logits = ad::matmul(pooled.v, tape.param(head.projection));
  HeadOutput out;
  out.logits = ad::reshape(logits, {head.projection.value.shape[1]});
  if (pooled.attention) out.attention.push_back(*pooled.attention);
  return out;
}

HeadOutput multiclass_forward(ad::Tape& tape, ad::Var states, const std::vector<ad::Var>& masks,
                              MultiClassHead& head, const HeadOptions& options) {
  const std::size_t n = head.projections.size();
  if (n < 2) throw ContractError("multiclass_forward: need at least 2 labels");
  if (masks.size() != n) {
    throw ContractError("multiclass_forward: " + std::to_string(masks.size()) + " masks for " +
                        std::to_string(n) + " labels");
  }
  const std::size_t d = head.projections.front().value.size();
  require_states(states, d, "multiclass_forward");
  HeadOutput out;
  std::vector<ad::Var> scores;
  scores.reserve(n);
  for (std::size_t y = 0; y < n; ++y) {
    ad::Var e = ad::mul(states, masks[y]);
    Pooled pooled = pool(tape, e, options.shared_embeddings ? states : e, masks[y], options);
    ad::Var c = ad::matmul(pooled.v, ad::reshape(tape.param(head.projections[y]), {d, 1}));
    scores.push_back(ad::reshape(c, {1}));
    if (pooled.attention) out.attention.push_back(*pooled.attention);
  }
  out.logits = ad::concat(scores);
  return out;
}

ad::Var distance_loss(ad::Tape& tape, const std::vector<ad::Var>& masks) {
  const std::size_t n = masks.size();
  if (n < 2) return tape.constant(Tensor::scalar(0.0));
  std::vector<ad::Var> cosines;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      ad::Var c = ad::cosine(masks[i], masks[j]);
      if (!c.requires_grad() && c.value().item() == 0.0) {
        bool zero_i = true, zero_j = true;
        for (double v : masks[i].value().data) zero_i = zero_i && v == 0.0;
        for (double v : masks[j].value().data) zero_j = zero_j && v == 0.0;
        if (zero_i || zero_j) {
          spdlog::warn("distance_loss: zero-norm mask in pair ({}, {}); cosine taken as 0", i, j);
        }
      }
      cosines.push_back(ad::reshape(c, {1}));
    }
  }
  return ad::mean(ad::concat(cosines));
}

ad::Var cross_entropy(ad::Tape& tape, ad::Var logits, int gold) {
  const std::size_t n = logits.value().size();
  if (gold < 0 || static_cast<std::size_t>(gold) >= n) {
    throw InputError("cross_entropy: label " + std::to_string(gold) + " outside " +
                     std::to_string(n) + " classes");
  }
  Tensor onehot({n}, 0.0);
  onehot.data[static_cast<std::size_t>(gold)] = -1.0;
  return ad::sum(ad::mul(ad::log_softmax(logits), tape.constant(onehot)));
}

}  // namespace imo
