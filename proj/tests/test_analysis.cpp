#include <doctest.h>

#include <atomic>
#include <cmath>
#include <set>

#include "imo/analysis.hpp"
#include "imo/errors.hpp"
#include "support.hpp"

using namespace imo;

namespace {

MaskSnapshot snap(std::vector<double> m) {
  MaskSnapshot s;
  s.m = m;
  for (double v : m) s.q.push_back(v != 0.0 ? 1.0 : 0.0);
  return s;
}

CorpusSpec small_spec() {
  CorpusSpec s;
  s.causal_per_label = 2;
  s.spurious_per_label = 2;
  s.n_filler = 8;
  s.t_min = 6;
  s.t_max = 8;
  s.n_causal = 2;
  s.n_spurious = 2;
  s.n_train = 64;
  s.n_validation = 32;
  s.n_test = 32;
  return s;
}

ModelConfig small_model(const CorpusSpec& spec) {
  ModelConfig c;
  c.encoder.vocab_size = spec.vocab_size();
  c.encoder.d_model = 8;
  c.encoder.n_layers = 2;
  c.encoder.n_heads = 2;
  c.encoder.d_ff = 16;
  c.encoder.max_len = spec.t_max;
  return c;
}

TrainConfig quick() {
  TrainConfig t;
  t.epochs_per_stage = 1;
  t.batch_size = 16;
  t.lr = 5e-3;
  return t;
}

}  // namespace

TEST_CASE("similarity examples") {
  CHECK(jaccard_similarity({1, 1, 0}, {1, 0, 0}) == 0.5);
  CHECK(jaccard_similarity({0, 0}, {0, 0}) == 1.0);
  CHECK(cosine_similarity({1, 2}, {1, 2}) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(cosine_similarity({0, 0}, {1, 2}) == 0.0);
  CHECK_THROWS_AS(cosine_similarity({1}, {1, 2}), ContractError);
}

TEST_CASE("similarity matches brute force") {
  Rng rng(21);
  std::uniform_int_distribution<int> bit(0, 1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t d = 1 + static_cast<std::size_t>(trial % 17);
    std::vector<double> a(d), b(d), qa(d), qb(d);
    const Tensor ra = test::random_tensor({d}, 1000 + trial), rb = test::random_tensor({d}, 2000 + trial);
    std::set<std::size_t> sa, sb;
    for (std::size_t k = 0; k < d; ++k) {
      a[k] = ra.data[k];
      b[k] = rb.data[k];
      qa[k] = bit(rng);
      qb[k] = bit(rng);
      if (qa[k]) sa.insert(k);
      if (qb[k]) sb.insert(k);
    }
    std::set<std::size_t> inter, uni = sa;
    for (std::size_t k : sb) {
      if (sa.count(k)) inter.insert(k);
      uni.insert(k);
    }
    const double want_j = uni.empty() ? 1.0 : double(inter.size()) / double(uni.size());
    CHECK(jaccard_similarity(qa, qb) == want_j);
    double dot = 0, na = 0, nb = 0;
    for (std::size_t k = 0; k < d; ++k) {
      dot += a[k] * b[k];
      na += a[k] * a[k];
      nb += b[k] * b[k];
    }
    CHECK(cosine_similarity(a, b) == doctest::Approx(dot / std::sqrt(na * nb)).epsilon(1e-14));
  }
}

TEST_CASE("similarity table") {
  const auto t = mask_similarity({"a", "b", "c"}, {snap({1, 0.5, 0}), snap({1, 0.5, 0}), snap({0, 0, 2})});
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(t.cosine[i][i] == 1.0);
    CHECK(t.jaccard[i][i] == 1.0);
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(t.cosine[i][j] == t.cosine[j][i]);
      CHECK(t.jaccard[i][j] == t.jaccard[j][i]);
      CHECK(t.jaccard[i][j] >= 0.0);
      CHECK(t.jaccard[i][j] <= 1.0);
    }
  }
  CHECK(t.cosine[0][1] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(t.jaccard[0][1] == 1.0);
  CHECK(t.cosine[0][2] == 0.0);
  CHECK(t.jaccard[0][2] == 0.0);
  const std::string csv = similarity_csv(t);
  CHECK(csv.rfind("measure,a,b,value\n", 0) == 0);
  CHECK_THROWS_AS(mask_similarity({"a"}, {snap({1})}), InputError);
  CHECK_THROWS_AS(mask_similarity({"a", "b"}, {snap({1}), snap({1, 2})}), InputError);
}

TEST_CASE("permutation baseline") {
  const MaskSnapshot a = snap({1, 0, 0, 0, 0, 0, 0, 0});
  const auto base = permutation_baseline(a, a, 400, 3);
  // A single kept feature lands on itself 1/8 of the time, with a random sign.
  CHECK(base.jaccard_mean == doctest::Approx(1.0 / 8).epsilon(0.3));
  CHECK(std::fabs(base.cosine_mean) < 0.1);
  CHECK(permutation_baseline(a, a, 10, 3).cosine_mean == permutation_baseline(a, a, 10, 3).cosine_mean);
  CHECK_THROWS_AS(permutation_baseline(a, a, 0, 3), ContractError);
}

TEST_CASE("standard variants") {
  const auto vs = standard_variants();
  CHECK(vs.size() == 10);
  std::set<std::string> names;
  for (const auto& v : vs) names.insert(v.name);
  CHECK(names.size() == 10);
  const Variant wam = variant_by_name("w/o am");
  CHECK_FALSE(wam.use_masks);
  CHECK(wam.pooling == Pooling::Mean);
  CHECK(variant_by_name("w/o sq").schedule == Schedule::Simultaneous);
  CHECK(variant_by_name("b2t").schedule == Schedule::BottomUp);
  CHECK(variant_by_name("last").schedule == Schedule::LastOnly);
  CHECK(variant_by_name("str").mask_variant == MaskVariant::STR);
  CHECK_THROWS_AS(variant_by_name("w/o everything"), ConfigError);
}

TEST_CASE("parallel_for runs every index and rethrows") {
  std::vector<int> hits(50, 0);
  parallel_for(50, 4, [&](std::size_t i) { hits[i] += 1; });
  for (int h : hits) CHECK(h == 1);
  CHECK_THROWS_AS(parallel_for(10, 3,
                               [](std::size_t i) {
                                 if (i == 7) throw RunError("boom");
                               }),
                  RunError);
}

TEST_CASE("ablation grid shape and the plain backbone") {
  const CorpusSpec spec = small_spec();
  const Corpus corpus = generate_corpus(spec);
  std::vector<Variant> nine;
  for (const auto& v : standard_variants())
    if (v.name != "last") nine.push_back(v);
  REQUIRE(nine.size() == 9);
  const auto rows = ablation_suite(corpus, small_model(spec), quick(), nine, {0, 1, 2, 3, 4}, 1);
  CHECK(rows.size() == 45);
  CHECK(rows[0].variant == nine[0].name);
  CHECK(rows[5].variant == nine[1].name);
  const std::string csv = outcomes_csv(rows);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 46);
  CHECK(csv.rfind("variant,seed,train_size,selected_stage,validation,top_sparsity,source,target_a,target_b,checksum\n", 0) == 0);

  // "w/o am" is a plain encoder with a mean-pooled linear head.
  ModelConfig mc = small_model(spec);
  mc.use_masks = false;
  mc.head.pooling = Pooling::Mean;
  mc.encoder.seed = 2;
  TrainConfig tc = quick();
  tc.seed = 2;
  Model plain(mc);
  train(plain, corpus.train, corpus.validation, tc);
  for (const auto& r : rows) {
    if (r.variant == "w/o am" && r.seed == 2) CHECK(r.checksum == plain.checksum());
  }
  CHECK(mean_score(rows, "imo", "source") >= 0.0);
  CHECK_THROWS_AS(mean_score(rows, "nope", "source"), UsageError);
}

TEST_CASE("threaded grids match serial ones") {
  const CorpusSpec spec = small_spec();
  const Corpus corpus = generate_corpus(spec);
  const std::vector<Variant> vs{variant_by_name("imo"), variant_by_name("w/o m")};
  const auto a = ablation_suite(corpus, small_model(spec), quick(), vs, {0, 1}, 1);
  const auto b = ablation_suite(corpus, small_model(spec), quick(), vs, {0, 1}, 3);
  CHECK(outcomes_csv(a) == outcomes_csv(b));
}

TEST_CASE("reverse mask study leaves the model untouched") {
  const CorpusSpec spec = small_spec();
  const Corpus corpus = generate_corpus(spec);
  Experiment ex = run_experiment(variant_by_name("imo"), corpus, small_model(spec), quick(), 0);
  const std::string before = ex.model.checksum();
  const auto report = reverse_mask_study(ex.model, corpus.train, corpus.test, quick(), "source");
  CHECK(ex.model.checksum() == before);
  CHECK(report.original.size() == 3);
  CHECK(report.reversed.size() == 3);
  CHECK(report.delta("source") == doctest::Approx(report.reversed[0].second - report.original[0].second));
  CHECK_FALSE(report.note.empty());
  CHECK(to_json(report)["source"] == "source");

  ModelConfig plain = small_model(spec);
  plain.use_masks = false;
  CHECK_THROWS_AS(reverse_mask_study(Model(plain), corpus.train, corpus.test, quick(), "source"), UsageError);
}

TEST_CASE("complementing all-ones masks leaves the head nothing to read") {
  const CorpusSpec spec = small_spec();
  const Corpus corpus = generate_corpus(spec);
  Model m(small_model(spec));
  m.set_mask_depth({1, 2});
  for (int l = 1; l <= 2; ++l) REQUIRE(sparsity_fraction(m.filters(l).front()) == 0.0);
  const auto report = reverse_mask_study(m, corpus.train, corpus.test, quick(), "source");
  // Every feature is cut, so every prediction is the same class.
  Model c = m;
  c.complement_masks();
  std::set<int> preds;
  for (const auto& e : corpus.test) preds.insert(c.predict(e.tokens));
  CHECK(preds.size() == 1);
  int majority = 0;
  for (const auto& e : filter_domain(corpus.test, "source")) majority += e.label == *preds.begin() ? 1 : 0;
  CHECK(report.reversed[0].second == doctest::Approx(majority / 32.0));
}

TEST_CASE("size sweep") {
  const CorpusSpec spec = small_spec();
  const Corpus corpus = generate_corpus(spec);
  const auto rows = size_sweep(corpus, {16}, small_model(spec), quick(), {0}, 1);
  CHECK(rows.size() == 2);
  CHECK(rows[0].train_size == 16);
  CHECK_THROWS_AS(size_sweep(corpus, {32, 16}, small_model(spec), quick(), {0}), ConfigError);
  CHECK_THROWS_AS(size_sweep(corpus, {16, 1000}, small_model(spec), quick(), {0}), ConfigError);
  CHECK_THROWS_AS(size_sweep(corpus, {}, small_model(spec), quick(), {0}), ConfigError);
}

TEST_CASE("attention dump") {
  const CorpusSpec spec = small_spec();
  const Corpus corpus = generate_corpus(spec);
  Model m(small_model(spec));
  m.set_mask_depth({2});
  const auto dump = attention_dump(m, {corpus.validation[0], corpus.validation[1]}, corpus.vocab);
  REQUIRE(dump.size() == 2);
  CHECK(dump[0]["tokens"].size() == corpus.validation[0].tokens.size());
  CHECK(dump[0]["weights"].size() == corpus.validation[0].tokens.size());
  CHECK(dump[0]["gold"] == corpus.validation[0].label);
  CHECK(dump[0]["predicted"] == m.predict(corpus.validation[0].tokens));

  CorpusSpec mspec = small_spec();
  mspec.n_labels = 3;
  ModelConfig mc = small_model(mspec);
  mc.n_labels = 3;
  Model mm(mc);
  mm.set_mask_depth({2});
  const Corpus mcorp = generate_corpus(mspec);
  const auto md = attention_dump(mm, {mcorp.validation[0]}, mcorp.vocab);
  CHECK(md[0]["weights"].size() == 3);
}
