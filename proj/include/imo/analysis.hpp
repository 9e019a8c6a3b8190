#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "imo/datagen.hpp"
#include "imo/model.hpp"
#include "imo/trainer.hpp"

namespace imo {

/// Runs fn(0..n-1) on up to `threads` workers. The first exception thrown by
/// any call is rethrown after all workers finish.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

// ---------------------------------------------------------------------------
// Similarity

/// Zero-norm operands give 0 and log a warning.
double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b);
/// |a ∧ b| / |a ∨ b| over nonzero entries; two empty sets give 1.
double jaccard_similarity(const std::vector<double>& qa, const std::vector<double>& qb);

struct SimilarityTable {
  std::vector<std::string> names;
  std::vector<std::vector<double>> cosine;   ///< over filtering vectors m
  std::vector<std::vector<double>> jaccard;  ///< over binary masks q
};

SimilarityTable mask_similarity(const std::vector<std::string>& names,
                                const std::vector<MaskSnapshot>& snapshots);
std::string similarity_csv(const SimilarityTable& table);

struct PermutationBaseline {
  double cosine_mean = 0.0;
  double jaccard_mean = 0.0;
};

/// Mean similarity of `a` against `n` copies of `b` with entries randomly
/// permuted (and, for m, randomly sign-flipped).
PermutationBaseline permutation_baseline(const MaskSnapshot& a, const MaskSnapshot& b, int n,
                                         std::uint64_t seed);

// ---------------------------------------------------------------------------
// Runs

/// One row of the ablation grid.
struct Variant {
  std::string name;
  bool use_masks = true;
  Pooling pooling = Pooling::Attention;
  MaskVariant mask_variant = MaskVariant::LongTailed;
  Schedule schedule = Schedule::TopDown;
};

/// imo, w/o m, w/o a, w/o am, ste, str, scalar, b2t, w/o sq, last.
std::vector<Variant> standard_variants();
Variant variant_by_name(const std::string& name);

/// Per-domain scores of `model` on `test`, in first-seen domain order.
std::vector<std::pair<std::string, double>> evaluate_domains(Model& model,
                                                             const std::vector<Example>& test,
                                                             Metric metric);

struct RunOutcome {
  std::string variant;
  std::uint64_t seed = 0;
  std::size_t train_size = 0;
  int selected_stage = 0;
  double validation = 0.0;
  double top_sparsity = 0.0;  ///< of the selected model's top mask(s)
  std::vector<std::pair<std::string, double>> test;
  std::string checksum;

  double score(const std::string& domain) const;
};

struct Experiment {
  RunOutcome outcome;
  Model model;  ///< selected stage
  std::vector<MetricRow> metrics;
};

/// Applies `variant` and `seed` to the base configs, trains on the corpus's
/// train split, selects on validation, and scores every test domain.
Experiment run_experiment(const Variant& variant, const Corpus& corpus, ModelConfig model_config,
                          TrainConfig train_config, std::uint64_t seed,
                          std::size_t train_size = 0);

/// Every (variant, seed) pair, variant-major. Runs are independent and may be
/// spread over `threads` workers.
std::vector<RunOutcome> ablation_suite(const Corpus& corpus, const ModelConfig& model_config,
                                       const TrainConfig& train_config,
                                       const std::vector<Variant>& variants,
                                       const std::vector<std::uint64_t>& seeds, int threads = 1);

/// Columns: variant, seed, train_size, selected_stage, validation,
/// top_sparsity, one column per domain, checksum.
std::string outcomes_csv(const std::vector<RunOutcome>& outcomes);

/// Mean of `domain` scores over outcomes of `variant` (and train size when
/// nonzero).
double mean_score(const std::vector<RunOutcome>& outcomes, const std::string& variant,
                  const std::string& domain, std::size_t train_size = 0);

// ---------------------------------------------------------------------------
// Reverse mask

struct ReverseMaskReport {
  std::vector<std::pair<std::string, double>> original;
  std::vector<std::pair<std::string, double>> reversed;
  std::string source;
  std::string note;

  double delta(const std::string& domain) const;  ///< reversed - original
};

/// Complements every q of a copy of `model`, freezes all but the head,
/// retrains the head on `train_set` and scores both models on `test`.
/// `model` is left untouched.
ReverseMaskReport reverse_mask_study(const Model& model, const std::vector<Example>& train_set,
                                     const std::vector<Example>& test, const TrainConfig& config,
                                     const std::string& source);
nlohmann::json to_json(const ReverseMaskReport& report);

// ---------------------------------------------------------------------------
// Training-size sweep

/// For each size (ascending, at most the corpus's train split), trains "imo"
/// and "w/o am" on the first `size` source examples, for each seed.
std::vector<RunOutcome> size_sweep(const Corpus& corpus, const std::vector<std::size_t>& sizes,
                                   const ModelConfig& model_config,
                                   const TrainConfig& train_config,
                                   const std::vector<std::uint64_t>& seeds, int threads = 1);

// ---------------------------------------------------------------------------
// Attention

/// Per example: {tokens[], weights[] (list of lists for multi-class),
/// predicted, gold}.
nlohmann::json attention_dump(Model& model, const std::vector<Example>& examples,
                              const std::vector<std::string>& vocab);

}  // namespace imo
