#pragma once

#include <functional>
#include <string>
#include <vector>

#include "imo/autodiff.hpp"
#include "imo/rng.hpp"
#include "imo/tensor.hpp"

namespace imo {

/// How the binary gate q = g(|r| - s) is trained.
enum class MaskVariant {
  LongTailed,  ///< unit step with the long-tailed surrogate derivative
  STE,         ///< unit step with the clipped straight-through estimator
  STR,         ///< soft threshold m = sign(r) * relu(|r| - sigmoid(s))
  Scalar,      ///< LongTailed with a single shared threshold
};

std::string to_string(MaskVariant v);
MaskVariant mask_variant_from_string(const std::string& s);

struct MaskInit {
  double r_mean = 1.0;
  double r_std = 0.01;
  double s = 0.05;
  /// STR stores a pre-sigmoid threshold; logit(0.05) gives the same initial cut.
  double str_s = -2.9444389791664403;
};

/// One filtering vector m = r ⊙ q for a d-wide hidden state.
class FilterLayer {
 public:
  FilterLayer() = default;
  FilterLayer(std::string name, int layer_index, std::size_t width, MaskVariant variant, Rng& rng,
              const MaskInit& init = {});

  struct Output {
    ad::Var q;
    ad::Var m;
  };

  /// Builds q and m on the tape; gradients reach r and s unless frozen.
  Output forward(ad::Tape& tape);

  /// q as plain values: 1 iff |r| - s >= 0 (STR: 1 iff m != 0), complemented
  /// when `complemented()` is set.
  Tensor binary_mask() const;
  Tensor filtering_vector() const;
  /// Pre-activation |r| - s (s broadcast for Scalar). Not defined for STR.
  Tensor preactivation() const;

  int layer_index() const { return layer_index_; }
  std::size_t width() const { return width_; }
  MaskVariant variant() const { return variant_; }

  bool frozen() const { return frozen_; }
  void set_frozen(bool f);

  /// Replaces q by |1 - q| for the reverse-mask study.
  bool complemented() const { return complemented_; }
  void set_complemented(bool c) { complemented_ = c; }

  /// Test seam: when set, non-recording forwards compute q_k = override(k, t_k)
  /// from the pre-activation instead of the unit step.
  using StepOverride = std::function<double(std::size_t, double)>;
  void set_step_override(StepOverride f) { step_override_ = std::move(f); }

  Parameter r;
  Parameter s;

 private:
  int layer_index_ = 0;
  std::size_t width_ = 0;
  MaskVariant variant_ = MaskVariant::LongTailed;
  bool frozen_ = false;
  bool complemented_ = false;
  StepOverride step_override_;
};

/// E = H ⊙ m, the same m for every token row.
ad::Var apply_mask(ad::Var states, ad::Var m);

/// Σ exp(-s_i) over the threshold entries; the Scalar variant counts its
/// single threshold d times.
ad::Var sparsity_loss(ad::Tape& tape, FilterLayer& layer);
double sparsity_loss_value(const FilterLayer& layer);

/// Fraction of zero entries in q (exact zeros of m for STR).
double sparsity_fraction(const FilterLayer& layer);

struct MaskSnapshot {
  int layer_index = 0;
  int label = -1;  ///< per-label top masks carry their label id
  std::vector<double> r, s, q, m;
  MaskVariant variant = MaskVariant::LongTailed;
  bool frozen = false;
};

MaskSnapshot snapshot(const FilterLayer& layer, int label = -1);

}  // namespace imo
