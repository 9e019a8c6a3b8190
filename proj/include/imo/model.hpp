#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "imo/autodiff.hpp"
#include "imo/encoder.hpp"
#include "imo/heads.hpp"
#include "imo/masking.hpp"

namespace imo {

struct ModelConfig {
  EncoderConfig encoder;
  int n_labels = 2;
  /// Per-label top masks and projection vectors. Implied when n_labels > 2.
  bool multiclass_head = false;
  bool use_masks = true;
  MaskVariant mask_variant = MaskVariant::LongTailed;
  MaskInit mask_init;
  HeadOptions head;
  /// Next layer consumes E^l (true) or H^l (false) when layer l is masked.
  bool masked_feeds_forward = true;

  bool is_multiclass() const { return multiclass_head || n_labels > 2; }
  void validate() const;
};

/// Training-stage metadata carried in checkpoints.
struct StageMeta {
  int stage = -1;
  std::string schedule;
  std::vector<int> masked_layers;
  double validation_metric = 0.0;
};

struct ForwardResult {
  EncodeTrace trace;
  ad::Var top_states;  ///< H^L
  HeadOutput head;
};

/// Encoder, per-layer filters, and classification head. Layers are numbered
/// 1..L; `mask_depth` lists the layers whose filters are applied.
class Model {
 public:
  Model() = default;
  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  int n_layers() const { return config_.encoder.n_layers; }
  std::size_t width() const { return static_cast<std::size_t>(config_.encoder.d_model); }

  const std::vector<int>& mask_depth() const { return mask_depth_; }
  void set_mask_depth(std::vector<int> layers);
  bool layer_masked(int layer) const;
  bool has_masks() const { return !masks_.empty(); }

  /// Filters at `layer`: one shared filter, or one per label at the top of a
  /// multi-class model.
  std::vector<FilterLayer>& filters(int layer);
  const std::vector<FilterLayer>& filters(int layer) const;

  ForwardResult forward(ad::Tape& tape, const std::vector<int>& tokens);
  /// H^L only; the top layer's filters are applied by `head_forward`.
  ad::Var encode_top(ad::Tape& tape, const std::vector<int>& tokens);
  HeadOutput head_forward(ad::Tape& tape, ad::Var top_states);

  /// Plain per-layer states H^1..H^L for `depth`, without touching the
  /// model's own mask depth.
  std::vector<Tensor> encode_states(const std::vector<int>& tokens, const std::vector<int>& depth);

  std::vector<double> predict_proba(const std::vector<int>& tokens);
  int predict(const std::vector<int>& tokens);

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  std::vector<Parameter*> backbone_parameters();
  std::vector<Parameter*> head_parameters();
  std::vector<Parameter*> mask_parameters(int layer);

  /// Marks everything untrainable and every filter frozen.
  void freeze_all();
  void set_backbone_trainable(bool trainable);
  void set_head_trainable(bool trainable);
  void set_layer_frozen(int layer, bool frozen);

  /// Replace every q by |1 - q|.
  void complement_masks();

  /// Hex SHA-1 over parameter names, shapes, and values.
  std::string checksum() const;

  std::vector<MaskSnapshot> mask_snapshots() const;

  Encoder& encoder() { return encoder_; }
  const Encoder& encoder() const { return encoder_; }
  BinaryHead& binary_head() { return binary_; }
  MultiClassHead& multiclass_head() { return multi_; }

  StageMeta stage;

 private:
  std::vector<ad::Var> top_queries(ad::Tape& tape);

  ModelConfig config_;
  Encoder encoder_;
  std::vector<std::vector<FilterLayer>> masks_;
  BinaryHead binary_;
  MultiClassHead multi_;
  std::vector<int> mask_depth_;
};

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Self-describing checkpoint: config, named parameter arrays, mask state,
/// and stage metadata. Float64 values round-trip exactly.
nlohmann::json checkpoint_json(const Model& model);
Model model_from_checkpoint(const nlohmann::json& j);
void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

nlohmann::json to_json(const MaskSnapshot& snap);
MaskSnapshot mask_snapshot_from_json(const nlohmann::json& j);

}  // namespace imo
