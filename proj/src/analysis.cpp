#include "imo/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <random>
#include <set>
#include <thread>

#include "imo/errors.hpp"
#include "imo/io.hpp"
#include "imo/log.hpp"
#include "imo/rng.hpp"

namespace imo {

using nlohmann::json;

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, threads)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::mutex mu;
  std::size_t next = 0;
  std::exception_ptr failure;
  auto work = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next >= n || failure) return;
        i = next++;
      }
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
  for (std::thread& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

// ---------------------------------------------------------------------------

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) {
    throw ContractError("cosine_similarity: sizes " + std::to_string(a.size()) + " and " +
                        std::to_string(b.size()));
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    dot += a[k] * b[k];
    na += a[k] * a[k];
    nb += b[k] * b[k];
  }
  if (na == 0.0 || nb == 0.0) {
    spdlog::warn("cosine_similarity: zero vector; reporting 0");
    return 0.0;
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

double jaccard_similarity(const std::vector<double>& qa, const std::vector<double>& qb) {
  if (qa.size() != qb.size()) {
    throw ContractError("jaccard_similarity: sizes " + std::to_string(qa.size()) + " and " +
                        std::to_string(qb.size()));
  }
  std::size_t inter = 0, uni = 0;
  for (std::size_t k = 0; k < qa.size(); ++k) {
    const bool a = qa[k] != 0.0, b = qb[k] != 0.0;
    inter += (a && b) ? 1 : 0;
    uni += (a || b) ? 1 : 0;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

SimilarityTable mask_similarity(const std::vector<std::string>& names,
                                const std::vector<MaskSnapshot>& snapshots) {
  if (snapshots.size() < 2) throw InputError("mask_similarity: need at least 2 snapshots");
  if (names.size() != snapshots.size()) {
    throw ContractError("mask_similarity: " + std::to_string(names.size()) + " names for " +
                        std::to_string(snapshots.size()) + " snapshots");
  }
  const std::size_t n = snapshots.size();
  for (const MaskSnapshot& s : snapshots) {
    if (s.m.size() != snapshots[0].m.size()) throw InputError("mask_similarity: widths differ");
  }
  SimilarityTable t;
  t.names = names;
  t.cosine.assign(n, std::vector<double>(n, 1.0));
  t.jaccard.assign(n, std::vector<double>(n, 1.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      t.cosine[i][j] = t.cosine[j][i] = cosine_similarity(snapshots[i].m, snapshots[j].m);
      t.jaccard[i][j] = t.jaccard[j][i] = jaccard_similarity(snapshots[i].q, snapshots[j].q);
    }
  }
  return t;
}

std::string similarity_csv(const SimilarityTable& t) {
  std::string out = "measure,a,b,value\n";
  const std::pair<const char*, const std::vector<std::vector<double>>*> measures[] = {
      {"cosine", &t.cosine}, {"jaccard", &t.jaccard}};
  for (const auto& [name, matrix] : measures) {
    for (std::size_t i = 0; i < t.names.size(); ++i) {
      for (std::size_t j = 0; j < t.names.size(); ++j) {
        out += std::string(name) + "," + t.names[i] + "," + t.names[j] + "," +
               format_double((*matrix)[i][j]) + "\n";
      }
    }
  }
  return out;
}

PermutationBaseline permutation_baseline(const MaskSnapshot& a, const MaskSnapshot& b, int n,
                                         std::uint64_t seed) {
  if (n < 1) throw ContractError("permutation_baseline: n must be >= 1");
  if (a.m.size() != b.m.size()) throw InputError("permutation_baseline: widths differ");
  Rng rng(seed);
  std::vector<std::size_t> perm(b.m.size());
  std::vector<double> m(b.m.size()), q(b.q.size());
  PermutationBaseline out;
  for (int k = 0; k < n; ++k) {
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    for (std::size_t i = 0; i < perm.size(); ++i) {
      const double sign = (rng() & 1U) ? 1.0 : -1.0;
      m[i] = sign * b.m[perm[i]];
      q[i] = b.q[perm[i]];
    }
    out.cosine_mean += cosine_similarity(a.m, m);
    out.jaccard_mean += jaccard_similarity(a.q, q);
  }
  out.cosine_mean /= n;
  out.jaccard_mean /= n;
  return out;
}

// ---------------------------------------------------------------------------

std::vector<Variant> standard_variants() {
  return {
      {"imo", true, Pooling::Attention, MaskVariant::LongTailed, Schedule::TopDown},
      {"w/o m", false, Pooling::Attention, MaskVariant::LongTailed, Schedule::TopDown},
      {"w/o a", true, Pooling::Mean, MaskVariant::LongTailed, Schedule::TopDown},
      {"w/o am", false, Pooling::Mean, MaskVariant::LongTailed, Schedule::TopDown},
      {"ste", true, Pooling::Attention, MaskVariant::STE, Schedule::TopDown},
      {"str", true, Pooling::Attention, MaskVariant::STR, Schedule::TopDown},
      {"scalar", true, Pooling::Attention, MaskVariant::Scalar, Schedule::TopDown},
      {"b2t", true, Pooling::Attention, MaskVariant::LongTailed, Schedule::BottomUp},
      {"w/o sq", true, Pooling::Attention, MaskVariant::LongTailed, Schedule::Simultaneous},
      {"last", true, Pooling::Attention, MaskVariant::LongTailed, Schedule::LastOnly},
  };
}

Variant variant_by_name(const std::string& name) {
  for (const Variant& v : standard_variants()) {
    if (v.name == name) return v;
  }
  throw ConfigError("variants", "unknown variant '" + name + "'");
}

std::vector<std::pair<std::string, double>> evaluate_domains(Model& model,
                                                             const std::vector<Example>& test,
                                                             Metric metric) {
  std::vector<std::pair<std::string, double>> out;
  for (const std::string& d : domains_of(test)) {
    out.emplace_back(d, evaluate(model, filter_domain(test, d), metric));
  }
  return out;
}

double RunOutcome::score(const std::string& domain) const {
  for (const auto& [d, v] : test) {
    if (d == domain) return v;
  }
  throw UsageError("run " + variant + ": no score for domain '" + domain + "'");
}

Experiment run_experiment(const Variant& variant, const Corpus& corpus, ModelConfig model_config,
                          TrainConfig train_config, std::uint64_t seed, std::size_t train_size) {
  model_config.use_masks = variant.use_masks;
  model_config.head.pooling = variant.pooling;
  model_config.mask_variant = variant.mask_variant;
  model_config.encoder.seed = seed;
  train_config.mask_variant = variant.mask_variant;
  train_config.schedule = variant.schedule;
  train_config.seed = seed;
  if (train_size > corpus.train.size()) {
    throw ConfigError("size_sweep.sizes", "size " + std::to_string(train_size) +
                                              " exceeds the " +
                                              std::to_string(corpus.train.size()) +
                                              "-example training split");
  }
  const std::vector<Example> train_set =
      train_size == 0 ? corpus.train
                      : std::vector<Example>(corpus.train.begin(),
                                             corpus.train.begin() +
                                                 static_cast<std::ptrdiff_t>(train_size));

  Model model(model_config);
  const std::string run_id = variant.name + "/" + std::to_string(seed);
  TrainResult result = train(model, train_set, corpus.validation, train_config, run_id);
  Experiment ex;
  ex.model = result.model();
  ex.metrics = std::move(result.metrics);
  RunOutcome& o = ex.outcome;
  o.variant = variant.name;
  o.seed = seed;
  o.train_size = train_set.size();
  o.selected_stage = result.stages[result.selected].stage;
  o.validation = result.stages[result.selected].validation_metric;
  if (ex.model.has_masks()) {
    double total = 0.0;
    const auto& top = ex.model.filters(ex.model.n_layers());
    for (const FilterLayer& f : top) total += sparsity_fraction(f);
    o.top_sparsity = total / static_cast<double>(top.size());
  }
  o.test = evaluate_domains(ex.model, corpus.test, train_config.selection_metric(model_config));
  o.checksum = ex.model.checksum();
  return ex;
}

std::vector<RunOutcome> ablation_suite(const Corpus& corpus, const ModelConfig& model_config,
                                       const TrainConfig& train_config,
                                       const std::vector<Variant>& variants,
                                       const std::vector<std::uint64_t>& seeds, int threads) {
  std::vector<RunOutcome> out(variants.size() * seeds.size());
  parallel_for(out.size(), threads, [&](std::size_t i) {
    out[i] = run_experiment(variants[i / seeds.size()], corpus, model_config, train_config,
                            seeds[i % seeds.size()])
                 .outcome;
  });
  return out;
}

std::string outcomes_csv(const std::vector<RunOutcome>& outcomes) {
  std::vector<std::string> domains;
  for (const RunOutcome& o : outcomes)
    for (const auto& [d, v] : o.test)
      if (std::find(domains.begin(), domains.end(), d) == domains.end()) domains.push_back(d);
  std::string out = "variant,seed,train_size,selected_stage,validation,top_sparsity";
  for (const std::string& d : domains) out += "," + d;
  out += ",checksum\n";
  for (const RunOutcome& o : outcomes) {
    out += o.variant + "," + std::to_string(o.seed) + "," + std::to_string(o.train_size) + "," +
           std::to_string(o.selected_stage) + "," + format_double(o.validation) + "," +
           format_double(o.top_sparsity);
    for (const std::string& d : domains) {
      auto it = std::find_if(o.test.begin(), o.test.end(),
                             [&](const auto& p) { return p.first == d; });
      out += "," + (it == o.test.end() ? std::string() : format_double(it->second));
    }
    out += "," + o.checksum + "\n";
  }
  return out;
}

double mean_score(const std::vector<RunOutcome>& outcomes, const std::string& variant,
                  const std::string& domain, std::size_t train_size) {
  double total = 0.0;
  std::size_t count = 0;
  for (const RunOutcome& o : outcomes) {
    if (o.variant != variant || (train_size != 0 && o.train_size != train_size)) continue;
    total += o.score(domain);
    ++count;
  }
  if (count == 0) throw UsageError("mean_score: no runs of '" + variant + "'");
  return total / static_cast<double>(count);
}

// ---------------------------------------------------------------------------

double ReverseMaskReport::delta(const std::string& domain) const {
  for (std::size_t i = 0; i < original.size(); ++i) {
    if (original[i].first == domain) return reversed[i].second - original[i].second;
  }
  throw UsageError("reverse mask report: no domain '" + domain + "'");
}

ReverseMaskReport reverse_mask_study(const Model& model, const std::vector<Example>& train_set,
                                     const std::vector<Example>& test, const TrainConfig& config,
                                     const std::string& source) {
  if (!model.has_masks()) throw UsageError("reverse_mask_study: model has no masks");
  const Metric metric = config.selection_metric(model.config());
  Model original = model;
  Model reversed = model;
  reversed.complement_masks();
  reversed.freeze_all();
  reversed.set_head_trainable(true);
  fit(reversed, train_set, {}, config, 500, {}, "reverse-mask");

  ReverseMaskReport r;
  r.source = source;
  r.original = evaluate_domains(original, test, metric);
  r.reversed = evaluate_domains(reversed, test, metric);
  r.note = "q replaced by |1-q| wherever m is derived, including the attention query; "
           "only the classification head was retrained";
  return r;
}

json to_json(const ReverseMaskReport& r) {
  json domains = json::array();
  for (std::size_t i = 0; i < r.original.size(); ++i) {
    domains.push_back({{"domain", r.original[i].first},
                       {"original", r.original[i].second},
                       {"reversed", r.reversed[i].second},
                       {"delta", r.reversed[i].second - r.original[i].second}});
  }
  return json{{"source", r.source}, {"domains", domains}, {"note", r.note}};
}

// ---------------------------------------------------------------------------

std::vector<RunOutcome> size_sweep(const Corpus& corpus, const std::vector<std::size_t>& sizes,
                                   const ModelConfig& model_config,
                                   const TrainConfig& train_config,
                                   const std::vector<std::uint64_t>& seeds, int threads) {
  if (sizes.empty()) throw ConfigError("size_sweep.sizes", "must be non-empty");
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (sizes[i] == 0) throw ConfigError("size_sweep.sizes", "sizes must be positive");
    if (i > 0 && sizes[i] <= sizes[i - 1]) {
      throw ConfigError("size_sweep.sizes", "sizes must be strictly ascending");
    }
    if (sizes[i] > corpus.train.size()) {
      throw ConfigError("size_sweep.sizes", "size " + std::to_string(sizes[i]) + " exceeds the " +
                                                std::to_string(corpus.train.size()) +
                                                "-example training split");
    }
  }
  const Variant variants[] = {variant_by_name("imo"), variant_by_name("w/o am")};
  const std::size_t per_size = 2 * seeds.size();
  std::vector<RunOutcome> out(sizes.size() * per_size);
  parallel_for(out.size(), threads, [&](std::size_t i) {
    const std::size_t size = sizes[i / per_size];
    const std::size_t k = i % per_size;
    out[i] = run_experiment(variants[k / seeds.size()], corpus, model_config, train_config,
                            seeds[k % seeds.size()], size)
                 .outcome;
  });
  return out;
}

// ---------------------------------------------------------------------------

json attention_dump(Model& model, const std::vector<Example>& examples,
                    const std::vector<std::string>& vocab) {
  json out = json::array();
  for (const Example& ex : examples) {
    ad::Tape tape(false);
    ForwardResult fr = model.forward(tape, ex.tokens);
    json tokens = json::array();
    for (int t : ex.tokens) {
      tokens.push_back(static_cast<std::size_t>(t) < vocab.size()
                           ? vocab[static_cast<std::size_t>(t)]
                           : std::to_string(t));
    }
    json weights = json::array();
    for (const ad::Var& a : fr.head.attention) weights.push_back(a.value().data);
    const std::vector<double>& logits = fr.head.logits.value().data;
    const int predicted =
        static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    json entry{{"tokens", tokens}, {"predicted", predicted}, {"gold", ex.label}};
    if (model.config().is_multiclass()) {
      entry["weights"] = weights;
    } else {
      entry["weights"] = weights.empty() ? json::array() : weights[0];
    }
    out.push_back(entry);
  }
  return out;
}

}  // namespace imo
