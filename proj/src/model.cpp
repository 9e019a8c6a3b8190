#include "imo/model.hpp"

#include <algorithm>
#include <cstring>

#include "imo/errors.hpp"
#include "imo/io.hpp"
#include "imo/json_util.hpp"

namespace imo {

using nlohmann::json;

void ModelConfig::validate() const {
  encoder.validate();
  if (n_labels < 2) throw ConfigError("model.n_labels", "must be >= 2");
}

Model::Model(const ModelConfig& config) : config_(config), encoder_(config.encoder) {
  config_.validate();
  const std::size_t d = width();
  const int top = n_layers();
  const auto n = static_cast<std::size_t>(config_.n_labels);
  if (config_.use_masks) {
    Rng rng(derive_seed(config_.encoder.seed, 2));
    for (int l = 1; l <= top; ++l) {
      std::vector<FilterLayer> group;
      const std::string base = "masks." + std::to_string(l);
      if (l == top && config_.is_multiclass()) {
        for (std::size_t y = 0; y < n; ++y) {
          group.emplace_back(base + ".label" + std::to_string(y), l, d, config_.mask_variant, rng,
                             config_.mask_init);
        }
      } else {
        group.emplace_back(base, l, d, config_.mask_variant, rng, config_.mask_init);
      }
      masks_.push_back(std::move(group));
    }
  }
  Rng head_rng(derive_seed(config_.encoder.seed, 3));
  if (config_.is_multiclass()) {
    multi_ = MultiClassHead(d, n, head_rng);
  } else {
    binary_ = BinaryHead(d, n, head_rng);
  }
}

void Model::set_mask_depth(std::vector<int> layers) {
  std::sort(layers.begin(), layers.end());
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
  for (int l : layers) {
    if (l < 1 || l > n_layers()) {
      throw ContractError("mask depth: layer " + std::to_string(l) + " outside 1.." +
                          std::to_string(n_layers()));
    }
  }
  if (!layers.empty() && !has_masks()) {
    throw UsageError("mask depth set on a model built without masks");
  }
  mask_depth_ = std::move(layers);
}

bool Model::layer_masked(int layer) const {
  return std::binary_search(mask_depth_.begin(), mask_depth_.end(), layer);
}

std::vector<FilterLayer>& Model::filters(int layer) {
  if (!has_masks()) throw UsageError("model has no masks");
  if (layer < 1 || layer > n_layers()) {
    throw ContractError("filters: layer " + std::to_string(layer) + " outside 1.." +
                        std::to_string(n_layers()));
  }
  return masks_[static_cast<std::size_t>(layer - 1)];
}

const std::vector<FilterLayer>& Model::filters(int layer) const {
  return const_cast<Model*>(this)->filters(layer);
}

ad::Var Model::encode_top(ad::Tape& tape, const std::vector<int>& tokens) {
  std::vector<std::optional<ad::Var>> masks(static_cast<std::size_t>(n_layers()));
  for (int l = 1; l < n_layers(); ++l) {
    if (layer_masked(l)) masks[static_cast<std::size_t>(l - 1)] = filters(l).front().forward(tape).m;
  }
  EncodeTrace trace = encoder_.encode(tape, tokens, masks, config_.masked_feeds_forward);
  return trace.hidden.back();
}

std::vector<ad::Var> Model::top_queries(ad::Tape& tape) {
  std::vector<ad::Var> out;
  if (layer_masked(n_layers())) {
    for (FilterLayer& f : filters(n_layers())) out.push_back(f.forward(tape).m);
    return out;
  }
  const std::size_t count = config_.is_multiclass() ? multi_.projections.size() : 1;
  for (std::size_t i = 0; i < count; ++i) out.push_back(tape.constant(Tensor({width()}, 1.0)));
  return out;
}

HeadOutput Model::head_forward(ad::Tape& tape, ad::Var top_states) {
  std::vector<ad::Var> queries = top_queries(tape);
  if (config_.is_multiclass()) {
    return multiclass_forward(tape, top_states, queries, multi_, config_.head);
  }
  ad::Var e = layer_masked(n_layers()) ? apply_mask(top_states, queries.front()) : top_states;
  return binary_forward(tape, e, queries.front(), binary_, config_.head);
}

ForwardResult Model::forward(ad::Tape& tape, const std::vector<int>& tokens) {
  std::vector<std::optional<ad::Var>> masks(static_cast<std::size_t>(n_layers()));
  for (int l = 1; l < n_layers(); ++l) {
    if (layer_masked(l)) masks[static_cast<std::size_t>(l - 1)] = filters(l).front().forward(tape).m;
  }
  ForwardResult out;
  out.trace = encoder_.encode(tape, tokens, masks, config_.masked_feeds_forward);
  out.top_states = out.trace.hidden.back();
  out.head = head_forward(tape, out.top_states);
  return out;
}

std::vector<Tensor> Model::encode_states(const std::vector<int>& tokens,
                                         const std::vector<int>& depth) {
  const std::vector<int> saved = mask_depth_;
  set_mask_depth(depth);
  ad::Tape tape(false);
  std::vector<std::optional<ad::Var>> masks(static_cast<std::size_t>(n_layers()));
  for (int l = 1; l <= n_layers(); ++l) {
    const bool shared = !(l == n_layers() && config_.is_multiclass());
    if (layer_masked(l) && shared) {
      masks[static_cast<std::size_t>(l - 1)] = filters(l).front().forward(tape).m;
    }
  }
  mask_depth_ = saved;
  EncodeTrace trace = encoder_.encode(tape, tokens, masks, config_.masked_feeds_forward);
  std::vector<Tensor> states;
  for (const ad::Var& h : trace.hidden) states.push_back(h.value());
  return states;
}

std::vector<double> Model::predict_proba(const std::vector<int>& tokens) {
  ad::Tape tape(false);
  ForwardResult fr = forward(tape, tokens);
  return ad::softmax(fr.head.logits).value().data;
}

int Model::predict(const std::vector<int>& tokens) {
  const std::vector<double> p = predict_proba(tokens);
  return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

std::vector<Parameter*> Model::backbone_parameters() { return encoder_.parameters(); }

std::vector<Parameter*> Model::head_parameters() {
  std::vector<Parameter*> out;
  if (config_.is_multiclass()) {
    for (Parameter& p : multi_.projections) out.push_back(&p);
  } else {
    out.push_back(&binary_.projection);
  }
  return out;
}

std::vector<Parameter*> Model::mask_parameters(int layer) {
  std::vector<Parameter*> out;
  for (FilterLayer& f : filters(layer)) {
    out.push_back(&f.r);
    out.push_back(&f.s);
  }
  return out;
}

std::vector<Parameter*> Model::parameters() {
  std::vector<Parameter*> out = backbone_parameters();
  for (int l = 1; has_masks() && l <= n_layers(); ++l) {
    for (Parameter* p : mask_parameters(l)) out.push_back(p);
  }
  for (Parameter* p : head_parameters()) out.push_back(p);
  return out;
}

std::vector<const Parameter*> Model::parameters() const {
  auto ps = const_cast<Model*>(this)->parameters();
  return {ps.begin(), ps.end()};
}

void Model::freeze_all() {
  for (Parameter* p : parameters()) p->trainable = false;
  for (auto& group : masks_)
    for (FilterLayer& f : group) f.set_frozen(true);
}

void Model::set_backbone_trainable(bool trainable) {
  for (Parameter* p : backbone_parameters()) p->trainable = trainable;
}

void Model::set_head_trainable(bool trainable) {
  for (Parameter* p : head_parameters()) p->trainable = trainable;
}

void Model::set_layer_frozen(int layer, bool frozen) {
  for (FilterLayer& f : filters(layer)) f.set_frozen(frozen);
}

void Model::complement_masks() {
  if (!has_masks()) throw UsageError("complement_masks: model has no masks");
  for (auto& group : masks_)
    for (FilterLayer& f : group) f.set_complemented(!f.complemented());
}

std::string Model::checksum() const {
  std::string buf;
  for (const Parameter* p : parameters()) {
    buf += p->name;
    buf += shape_string(p->value.shape);
    buf.append(reinterpret_cast<const char*>(p->value.data.data()),
               p->value.data.size() * sizeof(double));
  }
  for (const auto& group : masks_) {
    for (const FilterLayer& f : group) {
      buf.push_back(f.frozen() ? 'F' : 'f');
      buf.push_back(f.complemented() ? 'C' : 'c');
    }
  }
  for (int l : mask_depth_) buf += std::to_string(l) + ",";
  return sha1_hex(buf);
}

std::vector<MaskSnapshot> Model::mask_snapshots() const {
  std::vector<MaskSnapshot> out;
  for (const auto& group : masks_) {
    const bool per_label = group.size() > 1 || (config_.is_multiclass() &&
                                                 group.front().layer_index() == n_layers());
    for (std::size_t y = 0; y < group.size(); ++y) {
      out.push_back(snapshot(group[y], per_label ? static_cast<int>(y) : -1));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

json to_json(const ModelConfig& c) {
  const auto& e = c.encoder;
  return json{
      {"encoder",
       {{"vocab_size", e.vocab_size},
        {"d_model", e.d_model},
        {"n_layers", e.n_layers},
        {"n_heads", e.n_heads},
        {"d_ff", e.d_ff},
        {"max_len", e.max_len},
        {"seed", e.seed}}},
      {"n_labels", c.n_labels},
      {"multiclass_head", c.multiclass_head},
      {"use_masks", c.use_masks},
      {"mask_variant", to_string(c.mask_variant)},
      {"mask_init",
       {{"r_mean", c.mask_init.r_mean},
        {"r_std", c.mask_init.r_std},
        {"s", c.mask_init.s},
        {"str_s", c.mask_init.str_s}}},
      {"head",
       {{"pooling", c.head.pooling == Pooling::Attention ? "attention" : "mean"},
        {"normalize_attention", c.head.normalize_attention},
        {"shared_embeddings", c.head.shared_embeddings}}},
      {"masked_feeds_forward", c.masked_feeds_forward},
  };
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  if (j.contains("encoder")) {
    const json& e = j.at("encoder");
    const std::string p = "model.encoder";
    c.encoder.vocab_size = json_get(e, "vocab_size", c.encoder.vocab_size, p);
    c.encoder.d_model = json_get(e, "d_model", c.encoder.d_model, p);
    c.encoder.n_layers = json_get(e, "n_layers", c.encoder.n_layers, p);
    c.encoder.n_heads = json_get(e, "n_heads", c.encoder.n_heads, p);
    c.encoder.d_ff = json_get(e, "d_ff", c.encoder.d_ff, p);
    c.encoder.max_len = json_get(e, "max_len", c.encoder.max_len, p);
    c.encoder.seed = json_get(e, "seed", c.encoder.seed, p);
  }
  c.n_labels = json_get(j, "n_labels", c.n_labels, "model");
  c.multiclass_head = json_get(j, "multiclass_head", c.multiclass_head, "model");
  c.use_masks = json_get(j, "use_masks", c.use_masks, "model");
  try {
    c.mask_variant = mask_variant_from_string(
        json_get(j, "mask_variant", to_string(c.mask_variant), "model"));
  } catch (const ConfigError& err) {
    throw ConfigError("model.mask_variant", err.what());
  }
  if (j.contains("mask_init")) {
    const json& m = j.at("mask_init");
    c.mask_init.r_mean = json_get(m, "r_mean", c.mask_init.r_mean, "model.mask_init");
    c.mask_init.r_std = json_get(m, "r_std", c.mask_init.r_std, "model.mask_init");
    c.mask_init.s = json_get(m, "s", c.mask_init.s, "model.mask_init");
    c.mask_init.str_s = json_get(m, "str_s", c.mask_init.str_s, "model.mask_init");
  }
  if (j.contains("head")) {
    const json& h = j.at("head");
    const std::string pooling = json_get(h, "pooling", std::string("attention"), "model.head");
    if (pooling == "attention") {
      c.head.pooling = Pooling::Attention;
    } else if (pooling == "mean") {
      c.head.pooling = Pooling::Mean;
    } else {
      throw ConfigError("model.head.pooling", "unknown pooling '" + pooling + "'");
    }
    c.head.normalize_attention =
        json_get(h, "normalize_attention", c.head.normalize_attention, "model.head");
    c.head.shared_embeddings =
        json_get(h, "shared_embeddings", c.head.shared_embeddings, "model.head");
  }
  c.masked_feeds_forward = json_get(j, "masked_feeds_forward", c.masked_feeds_forward, "model");
  c.validate();
  return c;
}

json to_json(const MaskSnapshot& s) {
  return json{{"layer_index", s.layer_index}, {"label", s.label}, {"r", s.r},
              {"s", s.s},   {"q", s.q},         {"m", s.m},
              {"variant", to_string(s.variant)}, {"frozen", s.frozen}};
}

MaskSnapshot mask_snapshot_from_json(const json& j) {
  MaskSnapshot s;
  try {
    s.layer_index = j.at("layer_index").get<int>();
    s.label = j.value("label", -1);
    s.r = j.at("r").get<std::vector<double>>();
    s.s = j.at("s").get<std::vector<double>>();
    s.q = j.at("q").get<std::vector<double>>();
    s.m = j.at("m").get<std::vector<double>>();
    s.variant = mask_variant_from_string(j.at("variant").get<std::string>());
    s.frozen = j.at("frozen").get<bool>();
  } catch (const json::exception& e) {
    throw InputError(std::string("mask snapshot: ") + e.what());
  }
  return s;
}

json checkpoint_json(const Model& model) {
  json params = json::array();
  for (const Parameter* p : model.parameters()) {
    params.push_back({{"name", p->name}, {"shape", p->value.shape}, {"data", p->value.data}});
  }
  json masks = json::array();
  for (int l = 1; model.has_masks() && l <= model.n_layers(); ++l) {
    const auto& group = model.filters(l);
    for (std::size_t y = 0; y < group.size(); ++y) {
      masks.push_back({{"layer_index", l},
                       {"slot", y},
                       {"variant", to_string(group[y].variant())},
                       {"frozen", group[y].frozen()},
                       {"complemented", group[y].complemented()}});
    }
  }
  return json{{"format", "imo-checkpoint/1"},
              {"config", to_json(model.config())},
              {"mask_depth", model.mask_depth()},
              {"stage",
               {{"stage", model.stage.stage},
                {"schedule", model.stage.schedule},
                {"masked_layers", model.stage.masked_layers},
                {"validation_metric", model.stage.validation_metric}}},
              {"parameters", params},
              {"masks", masks}};
}

Model model_from_checkpoint(const json& j) {
  try {
    if (j.at("format").get<std::string>() != "imo-checkpoint/1") {
      throw InputError("checkpoint: unsupported format " + j.at("format").dump());
    }
    Model model(model_config_from_json(j.at("config")));
    std::vector<Parameter*> params = model.parameters();
    const json& stored = j.at("parameters");
    if (stored.size() != params.size()) {
      throw InputError("checkpoint: expected " + std::to_string(params.size()) +
                       " parameters, found " + std::to_string(stored.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      const json& sp = stored[i];
      if (sp.at("name").get<std::string>() != params[i]->name) {
        throw InputError("checkpoint: parameter " + std::to_string(i) + " is '" +
                         sp.at("name").get<std::string>() + "', expected '" + params[i]->name +
                         "'");
      }
      Shape shape = sp.at("shape").get<Shape>();
      std::vector<double> data = sp.at("data").get<std::vector<double>>();
      if (shape != params[i]->value.shape || data.size() != shape_size(shape)) {
        throw InputError("checkpoint: shape mismatch for " + params[i]->name);
      }
      Tensor value(std::move(shape), std::move(data));
      params[i]->value = std::move(value);
      params[i]->zero_grad();
    }
    for (const json& m : j.at("masks")) {
      FilterLayer& f =
          model.filters(m.at("layer_index").get<int>()).at(m.at("slot").get<std::size_t>());
      f.set_frozen(m.at("frozen").get<bool>());
      f.set_complemented(m.at("complemented").get<bool>());
    }
    model.set_mask_depth(j.at("mask_depth").get<std::vector<int>>());
    const json& st = j.at("stage");
    model.stage.stage = st.at("stage").get<int>();
    model.stage.schedule = st.at("schedule").get<std::string>();
    model.stage.masked_layers = st.at("masked_layers").get<std::vector<int>>();
    model.stage.validation_metric = st.at("validation_metric").get<double>();
    return model;
  } catch (const json::exception& e) {
    throw InputError(std::string("checkpoint: ") + e.what());
  }
}

void save_checkpoint(const Model& model, const std::string& path) {
  write_file(path, checkpoint_json(model).dump());
}

Model load_checkpoint(const std::string& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw InputError("checkpoint " + path + ": " + e.what());
  }
  return model_from_checkpoint(j);
}

}  // namespace imo
