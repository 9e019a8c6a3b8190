#include "imo/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "imo/errors.hpp"
#include "imo/io.hpp"
#include "imo/json_util.hpp"
#include "imo/log.hpp"
#include "imo/rng.hpp"

namespace imo {

using nlohmann::json;

std::string to_string(Schedule s) {
  switch (s) {
    case Schedule::TopDown: return "top_down";
    case Schedule::BottomUp: return "bottom_up";
    case Schedule::Simultaneous: return "simultaneous";
    case Schedule::LastOnly: return "last_only";
  }
  return "?";
}

Schedule schedule_from_string(const std::string& s) {
  if (s == "top_down") return Schedule::TopDown;
  if (s == "bottom_up") return Schedule::BottomUp;
  if (s == "simultaneous") return Schedule::Simultaneous;
  if (s == "last_only") return Schedule::LastOnly;
  throw ConfigError("train.schedule", "unknown schedule '" + s + "'");
}

std::string to_string(Metric m) { return m == Metric::Accuracy ? "accuracy" : "macro_f1"; }

Metric metric_from_string(const std::string& s) {
  if (s == "accuracy") return Metric::Accuracy;
  if (s == "macro_f1") return Metric::MacroF1;
  throw ConfigError("train.metric", "unknown metric '" + s + "'");
}

void TrainConfig::validate(const ModelConfig& model) const {
  // alpha = 0 is allowed: it is the reference point of the sparsity sweep.
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("train.alpha", "must be >= 0");
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigError("train.beta", "must be >= 0");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train.lr", "must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("train.beta1", "must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train.beta2", "must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("train.adam_eps", "must be > 0");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) {
    throw ConfigError("train.warmup_fraction", "must lie in [0, 1)");
  }
  if (epochs_per_stage < 1) throw ConfigError("train.epochs_per_stage", "must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size", "must be >= 1");
  if (max_masked_layers < 0 || max_masked_layers > model.encoder.n_layers) {
    throw ConfigError("train.max_masked_layers",
                      "must lie in [0, " + std::to_string(model.encoder.n_layers) + "]");
  }
  if (model.use_masks && mask_variant != model.mask_variant) {
    throw ConfigError("train.mask_variant", "differs from the model's mask variant");
  }
  if (!metric.empty()) metric_from_string(metric);
}

Metric TrainConfig::selection_metric(const ModelConfig& model) const {
  if (!metric.empty()) return metric_from_string(metric);
  return model.is_multiclass() ? Metric::MacroF1 : Metric::Accuracy;
}

json to_json(const TrainConfig& c) {
  return json{{"alpha", c.alpha},
              {"beta", c.beta},
              {"lr", c.lr},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"adam_eps", c.adam_eps},
              {"warmup_fraction", c.warmup_fraction},
              {"epochs_per_stage", c.epochs_per_stage},
              {"batch_size", c.batch_size},
              {"schedule", to_string(c.schedule)},
              {"mask_variant", to_string(c.mask_variant)},
              {"seed", c.seed},
              {"max_masked_layers", c.max_masked_layers},
              {"train_backbone", c.train_backbone},
              {"train_backbone_in_later_stages", c.train_backbone_in_later_stages},
              {"metric", c.metric},
              {"record_wallclock", c.record_wallclock}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  const std::string p = "train";
  c.alpha = json_get(j, "alpha", c.alpha, p);
  c.beta = json_get(j, "beta", c.beta, p);
  c.lr = json_get(j, "lr", c.lr, p);
  c.beta1 = json_get(j, "beta1", c.beta1, p);
  c.beta2 = json_get(j, "beta2", c.beta2, p);
  c.adam_eps = json_get(j, "adam_eps", c.adam_eps, p);
  c.warmup_fraction = json_get(j, "warmup_fraction", c.warmup_fraction, p);
  c.epochs_per_stage = json_get(j, "epochs_per_stage", c.epochs_per_stage, p);
  c.batch_size = json_get(j, "batch_size", c.batch_size, p);
  c.schedule = schedule_from_string(json_get(j, "schedule", to_string(c.schedule), p));
  try {
    c.mask_variant =
        mask_variant_from_string(json_get(j, "mask_variant", to_string(c.mask_variant), p));
  } catch (const ConfigError& e) {
    throw ConfigError("train.mask_variant", e.what());
  }
  c.seed = json_get(j, "seed", c.seed, p);
  c.max_masked_layers = json_get(j, "max_masked_layers", c.max_masked_layers, p);
  c.train_backbone = json_get(j, "train_backbone", c.train_backbone, p);
  c.train_backbone_in_later_stages =
      json_get(j, "train_backbone_in_later_stages", c.train_backbone_in_later_stages, p);
  c.metric = json_get(j, "metric", c.metric, p);
  c.record_wallclock = json_get(j, "record_wallclock", c.record_wallclock, p);
  return c;
}

// ---------------------------------------------------------------------------

bool adam_step(const std::vector<Parameter*>& params, AdamState& state, double lr_t,
               const TrainConfig& config) {
  for (const Parameter* p : params) {
    if (p->trainable && !p->grad.all_finite()) return false;
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  for (Parameter* p : params) {
    if (!p->trainable) continue;
    auto [it, fresh] = state.moments.try_emplace(p);
    if (fresh) {
      it->second.m = Tensor(p->value.shape, 0.0);
      it->second.v = Tensor(p->value.shape, 0.0);
    }
    if (it->second.m.shape != p->value.shape) {
      throw ContractError("adam_step: state shape " + shape_string(it->second.m.shape) +
                          " does not match " + p->name + " " + shape_string(p->value.shape));
    }
    double* m = it->second.m.data.data();
    double* v = it->second.v.data.data();
    const double* g = p->grad.data.data();
    double* x = p->value.data.data();
    for (std::size_t k = 0; k < p->value.size(); ++k) {
      m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g[k];
      v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g[k] * g[k];
      const double mhat = m[k] / c1;
      const double vhat = v[k] / c2;
      x[k] -= lr_t * mhat / (std::sqrt(vhat) + config.adam_eps);
    }
  }
  return true;
}

double learning_rate(long step, long total_steps, const TrainConfig& config) {
  if (total_steps <= 0) return config.lr;
  const long warm = static_cast<long>(std::floor(config.warmup_fraction * static_cast<double>(total_steps)));
  if (step < warm) return config.lr * static_cast<double>(step + 1) / static_cast<double>(warm);
  const double left = static_cast<double>(total_steps - step);
  return config.lr * std::max(left, 0.0) / static_cast<double>(total_steps - warm);
}

// ---------------------------------------------------------------------------

ad::Var total_loss(ad::Tape& tape, Model& model, const std::vector<Example>& batch,
                   const std::vector<int>& active_layers, const TrainConfig& config) {
  if (batch.empty()) throw InputError("total_loss: empty batch");
  std::vector<ad::Var> losses;
  losses.reserve(batch.size());
  for (const Example& ex : batch) {
    ForwardResult fr = model.forward(tape, ex.tokens);
    losses.push_back(ad::reshape(cross_entropy(tape, fr.head.logits, ex.label), {1}));
  }
  ad::Var loss = ad::mean(ad::concat(losses));
  if (!model.has_masks()) return loss;
  for (int l : active_layers) {
    for (FilterLayer& f : model.filters(l)) {
      loss = ad::add(loss, ad::scale(sparsity_loss(tape, f), config.alpha));
    }
  }
  const int top = model.n_layers();
  if (model.config().is_multiclass() && model.layer_masked(top) && config.beta != 0.0) {
    std::vector<ad::Var> masks;
    for (FilterLayer& f : model.filters(top)) masks.push_back(f.forward(tape).m);
    loss = ad::add(loss, ad::scale(distance_loss(tape, masks), config.beta));
  }
  return loss;
}

double metric_score(const std::vector<int>& predicted, const std::vector<int>& gold, int n_labels,
                    Metric metric) {
  if (gold.empty()) throw InputError("evaluate: empty dataset");
  if (predicted.size() != gold.size()) {
    throw ContractError("evaluate: " + std::to_string(predicted.size()) + " predictions for " +
                        std::to_string(gold.size()) + " labels");
  }
  const auto n = static_cast<std::size_t>(n_labels);
  std::vector<std::size_t> tp(n, 0), fp(n, 0), fn(n, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const int g = gold[i], p = predicted[i];
    if (g < 0 || g >= n_labels) throw InputError("evaluate: gold label outside label space");
    if (p < 0 || p >= n_labels) throw InputError("evaluate: prediction outside label space");
    if (g == p) {
      ++correct;
      ++tp[static_cast<std::size_t>(g)];
    } else {
      ++fp[static_cast<std::size_t>(p)];
      ++fn[static_cast<std::size_t>(g)];
    }
  }
  if (metric == Metric::Accuracy) {
    return static_cast<double>(correct) / static_cast<double>(gold.size());
  }
  double total = 0.0;
  for (std::size_t c = 0; c < n; ++c) {
    const double denom = static_cast<double>(2 * tp[c] + fp[c] + fn[c]);
    total += denom == 0.0 ? 0.0 : 2.0 * static_cast<double>(tp[c]) / denom;
  }
  return total / static_cast<double>(n);
}

std::vector<int> predict_all(Model& model, const std::vector<Example>& data) {
  std::vector<int> out;
  out.reserve(data.size());
  for (const Example& ex : data) out.push_back(model.predict(ex.tokens));
  return out;
}

double evaluate(Model& model, const std::vector<Example>& data, Metric metric) {
  if (data.empty()) throw InputError("evaluate: empty dataset");
  std::vector<int> gold;
  gold.reserve(data.size());
  for (const Example& ex : data) gold.push_back(ex.label);
  return metric_score(predict_all(model, data), gold, model.config().n_labels, metric);
}

// ---------------------------------------------------------------------------

std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::string out = "run_id,stage,epoch,split,metric_name,value,sparsity_fraction,wallclock_s\n";
  for (const MetricRow& r : rows) {
    out += r.run_id + "," + std::to_string(r.stage) + "," + std::to_string(r.epoch) + "," +
           r.split + "," + r.metric_name + "," + format_double(r.value) + "," +
           format_double(r.sparsity_fraction) + "," + format_double(r.wallclock_s) + "\n";
  }
  return out;
}

std::vector<std::vector<int>> stage_plan(Schedule schedule, int n_layers, int max_masked_layers) {
  const int k = max_masked_layers == 0 ? n_layers : max_masked_layers;
  std::vector<std::vector<int>> plan;
  switch (schedule) {
    case Schedule::TopDown:
      for (int i = 0; i < k; ++i) plan.push_back({n_layers - i});
      break;
    case Schedule::BottomUp:
      for (int i = 0; i < k; ++i) plan.push_back({1 + i});
      break;
    case Schedule::Simultaneous: {
      std::vector<int> all;
      for (int l = n_layers - k + 1; l <= n_layers; ++l) all.push_back(l);
      plan.push_back(all);
      break;
    }
    case Schedule::LastOnly:
      plan.push_back({n_layers});
      break;
  }
  return plan;
}

std::size_t select_stage(const std::vector<StageRecord>& stages) {
  if (stages.empty()) throw UsageError("select_stage: no stages");
  std::size_t best = 0;
  for (std::size_t i = 1; i < stages.size(); ++i) {
    if (stages[i].validation_metric >= stages[best].validation_metric) best = i;
  }
  return best;
}

namespace {

double mean_sparsity(const Model& model, const std::vector<int>& layers) {
  if (!model.has_masks() || layers.empty()) return 0.0;
  double total = 0.0;
  std::size_t count = 0;
  for (int l : layers) {
    for (const FilterLayer& f : model.filters(l)) {
      total += sparsity_fraction(f);
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

}  // namespace

void fit(Model& model, const std::vector<Example>& data, const std::vector<int>& active_layers,
         const TrainConfig& config, std::uint64_t stream,
         const std::function<void(int, double)>& on_epoch, const std::string& run_id) {
  if (data.empty()) throw InputError("fit: empty training split");
  const std::vector<Parameter*> params = model.parameters();
  const auto batch_size = static_cast<std::size_t>(config.batch_size);
  const std::size_t steps_per_epoch = (data.size() + batch_size - 1) / batch_size;
  const long total_steps = static_cast<long>(steps_per_epoch) * config.epochs_per_stage;

  AdamState adam;
  Rng shuffle_rng(derive_seed(config.seed, stream));
  std::vector<std::size_t> order(data.size());
  std::vector<Example> batch;
  long step = 0;
  int consecutive_aborts = 0;
  for (int epoch = 0; epoch < config.epochs_per_stage; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      batch.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + batch_size); ++i) {
        batch.push_back(data[order[i]]);
      }
      for (Parameter* p : params) p->zero_grad();
      ad::Tape tape;
      ad::Var loss = total_loss(tape, model, batch, active_layers, config);
      if (loss.requires_grad()) tape.backward(loss);
      loss_sum += loss.value().item();
      ++loss_count;
      if (adam_step(params, adam, learning_rate(step, total_steps, config), config)) {
        consecutive_aborts = 0;
      } else {
        ++consecutive_aborts;
        spdlog::warn("run {}: non-finite gradient at step {}; step skipped", run_id, step);
        if (consecutive_aborts >= 3) {
          throw RunError("run " + run_id + ": 3 consecutive non-finite gradient steps");
        }
      }
      ++step;
    }
    if (on_epoch) on_epoch(epoch, loss_sum / static_cast<double>(loss_count));
  }
}

TrainResult train(Model& model, const std::vector<Example>& train_set,
                  const std::vector<Example>& validation, const TrainConfig& config,
                  const std::string& run_id) {
  config.validate(model.config());
  if (train_set.empty()) throw InputError("train: empty training split");
  if (validation.empty()) throw InputError("train: empty validation split");
  const Metric metric = config.selection_metric(model.config());
  const std::vector<std::vector<int>> plan =
      model.has_masks() ? stage_plan(config.schedule, model.n_layers(), config.max_masked_layers)
                        : std::vector<std::vector<int>>{{}};

  TrainResult result;
  std::vector<int> masked;
  for (std::size_t stage = 0; stage < plan.size(); ++stage) {
    const auto t0 = Clock::now();
    const std::vector<int>& active = plan[stage];
    masked.insert(masked.end(), active.begin(), active.end());
    std::sort(masked.begin(), masked.end());
    model.set_mask_depth(masked);

    model.freeze_all();
    const bool first = stage == 0;
    model.set_backbone_trainable(first ? config.train_backbone
                                       : config.train_backbone_in_later_stages);
    model.set_head_trainable(first || config.train_backbone_in_later_stages);
    for (int l : active) model.set_layer_frozen(l, false);

    const int st = static_cast<int>(stage);
    fit(model, train_set, active, config, 100 + stage,
        [&](int epoch, double loss) {
          const double sparsity = mean_sparsity(model, active);
          const double wall = config.record_wallclock ? seconds_since(t0) : 0.0;
          result.metrics.push_back({run_id, st, epoch, "train", "loss", loss, sparsity, wall});
          const double val = evaluate(model, validation, metric);
          result.metrics.push_back(
              {run_id, st, epoch, "validation", to_string(metric), val, sparsity, wall});
          spdlog::info("run {} stage {} epoch {}: loss {:.4f} validation {} {:.4f} sparsity {:.3f}",
                       run_id, stage, epoch, loss, to_string(metric), val, sparsity);
        },
        run_id);

    StageRecord rec;
    rec.stage = st;
    rec.masked_layers = masked;
    rec.trained_layers = active;
    rec.validation_metric = result.metrics.back().value;
    rec.sparsity_fraction = mean_sparsity(model, active);
    rec.wallclock_s = seconds_since(t0);
    model.stage = {rec.stage, to_string(config.schedule), masked, rec.validation_metric};
    rec.model = model;
    result.stages.push_back(std::move(rec));
  }
  result.selected = select_stage(result.stages);
  return result;
}

}  // namespace imo
