#pragma once

#include <vector>

#include "imo/autodiff.hpp"
#include "imo/rng.hpp"
#include "imo/tensor.hpp"

namespace imo {

enum class Pooling {
  Attention,  ///< a_i = m · e_i, v = Σ a_i e_i
  Mean,       ///< v = mean_i e_i (the "w/o a" ablation)
};

struct HeadOptions {
  Pooling pooling = Pooling::Attention;
  /// Softmax-normalize a over positions. Off by default: weights are raw dot products.
  bool normalize_attention = false;
  /// Multi-class only: aggregate the unmasked head inputs instead of the
  /// per-label masked states.
  bool shared_embeddings = false;
};

/// Fully-connected projection P (d x n_labels), no bias.
struct BinaryHead {
  BinaryHead() = default;
  BinaryHead(std::size_t width, std::size_t n_labels, Rng& rng);
  Parameter projection;
};

/// One projection vector p_y per label; the per-label masks live with the
/// model's top-layer filters.
struct MultiClassHead {
  MultiClassHead() = default;
  MultiClassHead(std::size_t width, std::size_t n_labels, Rng& rng);
  std::vector<Parameter> projections;
};

struct HeadOutput {
  ad::Var logits;  ///< shape [n_labels]
  /// Attention weights over tokens, one [T] tensor per label (one in total
  /// for the binary head). Empty under mean pooling.
  std::vector<ad::Var> attention;
};

/// Binary/FC head over masked states E [T x d] with query m [d].
HeadOutput binary_forward(ad::Tape& tape, ad::Var masked_states, ad::Var query, BinaryHead& head,
                          const HeadOptions& options = {});

/// Per-label head over states H [T x d]: e_y = H ⊙ m_y, a_y = e_y m_y,
/// v_y = Σ a_yi e_yi, c_y = v_y · p_y.
HeadOutput multiclass_forward(ad::Tape& tape, ad::Var states, const std::vector<ad::Var>& masks,
                              MultiClassHead& head, const HeadOptions& options = {});

/// Mean cosine similarity over ordered pairs i != j. Pairs involving a
/// zero-norm mask count as 0 and log a warning.
ad::Var distance_loss(ad::Tape& tape, const std::vector<ad::Var>& masks);

/// Cross-entropy of one example: -log softmax(logits)[gold].
ad::Var cross_entropy(ad::Tape& tape, ad::Var logits, int gold);

}  // namespace imo
