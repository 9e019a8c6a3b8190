#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "imo/datagen.hpp"
#include "imo/model.hpp"

namespace imo {

enum class Schedule { TopDown, BottomUp, Simultaneous, LastOnly };
std::string to_string(Schedule s);
Schedule schedule_from_string(const std::string& s);

enum class Metric { Accuracy, MacroF1 };
std::string to_string(Metric m);
Metric metric_from_string(const std::string& s);

struct TrainConfig {
  double alpha = 0.1;
  double beta = 0.1;
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double warmup_fraction = 0.1;
  int epochs_per_stage = 5;
  int batch_size = 32;
  Schedule schedule = Schedule::TopDown;
  MaskVariant mask_variant = MaskVariant::LongTailed;
  std::uint64_t seed = 0;
  /// Number of mask layers to train, counted from where the schedule starts.
  /// 0 means all L layers.
  int max_masked_layers = 0;
  /// Train the encoder in the first stage.
  bool train_backbone = true;
  /// Keep encoder and head trainable after the first stage.
  bool train_backbone_in_later_stages = false;
  /// Empty: accuracy for binary models, macro-F1 otherwise.
  std::string metric;
  /// Write measured times into the metrics log instead of 0.
  bool record_wallclock = false;

  /// Throws ConfigError("train.<field>"). `model` supplies L and whether
  /// masks exist.
  void validate(const ModelConfig& model) const;
  Metric selection_metric(const ModelConfig& model) const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Optimizer

struct AdamState {
  struct Moments {
    Tensor m, v;
  };
  std::map<const Parameter*, Moments> moments;
  long step = 0;
};

/// One Adam update with bias correction over every trainable parameter,
/// using each parameter's accumulated grad. Returns false and leaves all
/// values untouched when any gradient is non-finite.
bool adam_step(const std::vector<Parameter*>& params, AdamState& state, double lr_t,
               const TrainConfig& config);

/// Linear warmup over the first warmup_fraction of steps, then linear decay
/// to zero. `step` is 0-based.
double learning_rate(long step, long total_steps, const TrainConfig& config);

// ---------------------------------------------------------------------------
// Loss and evaluation

/// Mean cross-entropy over `batch` plus alpha times the sparsity loss of each
/// layer in `active_layers`, plus beta times the distance loss of the
/// per-label top masks when they are applied.
ad::Var total_loss(ad::Tape& tape, Model& model, const std::vector<Example>& batch,
                   const std::vector<int>& active_layers, const TrainConfig& config);

/// Accuracy or macro-F1 of `predicted` against `gold`. A class absent from
/// both contributes F1 = 0 to the macro average.
double metric_score(const std::vector<int>& predicted, const std::vector<int>& gold, int n_labels,
                    Metric metric);
std::vector<int> predict_all(Model& model, const std::vector<Example>& data);
double evaluate(Model& model, const std::vector<Example>& data, Metric metric);

// ---------------------------------------------------------------------------
// Schedules

struct MetricRow {
  std::string run_id;
  int stage = 0;
  int epoch = 0;  ///< -1 for rows computed on a finished model
  std::string split;
  std::string metric_name;
  double value = 0.0;
  double sparsity_fraction = 0.0;
  double wallclock_s = 0.0;
};

std::string metrics_csv(const std::vector<MetricRow>& rows);

struct StageRecord {
  int stage = 0;
  std::vector<int> masked_layers;
  std::vector<int> trained_layers;
  double validation_metric = 0.0;
  double sparsity_fraction = 0.0;  ///< mean over trained layers
  double wallclock_s = 0.0;
  Model model;  ///< theta_{L:L-i}
};

struct TrainResult {
  std::vector<StageRecord> stages;
  std::size_t selected = 0;
  std::vector<MetricRow> metrics;
  Model& model() { return stages.at(selected).model; }
};

/// Layers trained at each stage of `schedule`, outermost vector = stages.
std::vector<std::vector<int>> stage_plan(Schedule schedule, int n_layers, int max_masked_layers);

/// Index of the best validation metric; ties go to the later stage.
std::size_t select_stage(const std::vector<StageRecord>& stages);

/// Runs `config.epochs_per_stage` epochs of Adam over whichever parameters
/// are currently trainable, with the sparsity term on `active_layers`.
/// `stream` seeds the shuffling. Calls `on_epoch(epoch, mean_loss)`.
void fit(Model& model, const std::vector<Example>& data, const std::vector<int>& active_layers,
         const TrainConfig& config, std::uint64_t stream,
         const std::function<void(int, double)>& on_epoch = {},
         const std::string& run_id = "run");

/// Trains `model` in place following `config.schedule` and returns the stage
/// records with the selected one. A model without masks trains in a single
/// stage with no regularizers.
TrainResult train(Model& model, const std::vector<Example>& train_set,
                  const std::vector<Example>& validation, const TrainConfig& config,
                  const std::string& run_id = "run");

}  // namespace imo
