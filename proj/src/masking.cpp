#include "imo/masking.hpp"

#include <cmath>

#include "imo/errors.hpp"

namespace imo {

std::string to_string(MaskVariant v) {
  switch (v) {
    case MaskVariant::LongTailed: return "long_tailed";
    case MaskVariant::STE: return "ste";
    case MaskVariant::STR: return "str";
    case MaskVariant::Scalar: return "scalar";
  }
  return "?";
}

MaskVariant mask_variant_from_string(const std::string& s) {
  if (s == "long_tailed") return MaskVariant::LongTailed;
  if (s == "ste") return MaskVariant::STE;
  if (s == "str") return MaskVariant::STR;
  if (s == "scalar") return MaskVariant::Scalar;
  throw ConfigError("mask_variant", "unknown variant '" + s + "'");
}

FilterLayer::FilterLayer(std::string name, int layer_index, std::size_t width,
                         MaskVariant variant, Rng& rng, const MaskInit& init)
    : layer_index_(layer_index), width_(width), variant_(variant) {
  r = Parameter(name + ".r", normal_tensor({width}, init.r_mean, init.r_std, rng));
  const std::size_t s_width = variant == MaskVariant::Scalar ? 1 : width;
  const double s0 = variant == MaskVariant::STR ? init.str_s : init.s;
  s = Parameter(name + ".s", Tensor({s_width}, s0));
}

void FilterLayer::set_frozen(bool f) {
  frozen_ = f;
  r.trainable = !f;
  s.trainable = !f;
}

FilterLayer::Output FilterLayer::forward(ad::Tape& tape) {
  ad::Var rv = tape.param(r);
  ad::Var sv = tape.param(s);
  const Shape shape{width_};
  ad::Var q;
  ad::Var m;
  if (variant_ == MaskVariant::STR) {
    ad::Var magnitude = ad::relu(ad::sub(ad::abs(rv), ad::sigmoid(sv)));
    Tensor sign(shape), keep(shape);
    for (std::size_t k = 0; k < width_; ++k) {
      sign.data[k] = r.value.data[k] > 0 ? 1.0 : (r.value.data[k] < 0 ? -1.0 : 0.0);
    }
    m = ad::mul(magnitude, tape.constant(sign));
    for (std::size_t k = 0; k < width_; ++k) keep.data[k] = m.value().data[k] != 0.0 ? 1.0 : 0.0;
    q = tape.constant(keep);
    if (complemented_) {
      for (double& v : keep.data) v = 1.0 - v;
      q = tape.constant(keep);
      m = ad::mul(rv, q);
    }
    return {q, m};
  }

  ad::Var t = ad::sub(ad::abs(rv), sv);
  if (step_override_ && !tape.recording()) {
    Tensor qv(shape);
    for (std::size_t k = 0; k < width_; ++k) qv.data[k] = step_override_(k, t.value().data[k]);
    q = tape.constant(qv);
  } else {
    q = ad::unit_step(t, variant_ == MaskVariant::STE ? ad::Surrogate::ClippedSTE
                                                      : ad::Surrogate::LongTailed);
  }
  if (complemented_) q = ad::sub(tape.constant(Tensor(shape, 1.0)), q);
  m = ad::mul(rv, q);
  return {q, m};
}

Tensor FilterLayer::preactivation() const {
  if (variant_ == MaskVariant::STR) throw UsageError("preactivation: undefined for STR masks");
  Tensor t({width_});
  for (std::size_t k = 0; k < width_; ++k) {
    t.data[k] = std::fabs(r.value.data[k]) - s.value.data[s.value.size() == 1 ? 0 : k];
  }
  return t;
}

Tensor FilterLayer::binary_mask() const {
  Tensor q({width_});
  if (variant_ == MaskVariant::STR) {
    for (std::size_t k = 0; k < width_; ++k) {
      const double thr = 1.0 / (1.0 + std::exp(-s.value.data[k]));
      q.data[k] = std::fabs(r.value.data[k]) - thr > 0.0 ? 1.0 : 0.0;
    }
  } else {
    const Tensor t = preactivation();
    for (std::size_t k = 0; k < width_; ++k) q.data[k] = t.data[k] >= 0.0 ? 1.0 : 0.0;
  }
  if (complemented_) {
    for (double& v : q.data) v = 1.0 - v;
  }
  return q;
}

Tensor FilterLayer::filtering_vector() const {
  ad::Tape tape(false);
  return const_cast<FilterLayer*>(this)->forward(tape).m.value();
}

ad::Var apply_mask(ad::Var states, ad::Var m) {
  const Tensor& h = states.value();
  const Tensor& mv = m.value();
  if (mv.rank() != 1 || h.last_dim() != mv.size()) {
    throw ContractError("apply_mask: width mismatch " + shape_string(h.shape) + " vs " +
                        shape_string(mv.shape));
  }
  return ad::mul(states, m);
}

ad::Var sparsity_loss(ad::Tape& tape, FilterLayer& layer) {
  ad::Var total = ad::sum(ad::exp(ad::scale(tape.param(layer.s), -1.0)));
  if (layer.s.value.size() == 1 && layer.width() != 1) {
    total = ad::scale(total, static_cast<double>(layer.width()));
  }
  return total;
}

double sparsity_loss_value(const FilterLayer& layer) {
  double total = 0.0;
  for (double v : layer.s.value.data) total += std::exp(-v);
  if (layer.s.value.size() == 1) total *= static_cast<double>(layer.width());
  return total;
}

double sparsity_fraction(const FilterLayer& layer) {
  if (layer.width() == 0) return 0.0;
  const Tensor q = layer.binary_mask();
  std::size_t zeros = 0;
  for (double v : q.data) zeros += v == 0.0 ? 1 : 0;
  return static_cast<double>(zeros) / static_cast<double>(layer.width());
}

MaskSnapshot snapshot(const FilterLayer& layer, int label) {
  MaskSnapshot snap;
  snap.layer_index = layer.layer_index();
  snap.label = label;
  snap.r = layer.r.value.data;
  snap.s = layer.s.value.data;
  snap.q = layer.binary_mask().data;
  snap.m = layer.filtering_vector().data;
  snap.variant = layer.variant();
  snap.frozen = layer.frozen();
  return snap;
}

}  // namespace imo
