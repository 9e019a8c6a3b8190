#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "imo/datagen.hpp"
#include "imo/errors.hpp"
#include "imo/io.hpp"
#include "imo/model.hpp"

using namespace imo;
namespace fs = std::filesystem;

namespace {

/// Majority vote over one token family; ties go to label 0.
int vote(const Example& e, const CorpusSpec& spec, bool spurious) {
  std::vector<int> counts(static_cast<std::size_t>(spec.n_labels), 0);
  for (int t : e.tokens) {
    const int y = spurious ? spec.spurious_label(t) : spec.causal_label(t);
    if (y >= 0) ++counts[static_cast<std::size_t>(y)];
  }
  return static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

double vote_accuracy(const std::vector<Example>& data, const CorpusSpec& spec, bool spurious) {
  int ok = 0;
  for (const Example& e : data) ok += vote(e, spec, spurious) == e.label ? 1 : 0;
  return static_cast<double>(ok) / static_cast<double>(data.size());
}

/// Expected binary majority-vote accuracy over n spurious tokens, each agreeing
/// with probability rho, by enumerating agreement patterns and both labels.
double enumerate_vote_accuracy(int n, double rho) {
  double acc = 0.0;
  for (int label = 0; label < 2; ++label) {
    for (int pattern = 0; pattern < (1 << n); ++pattern) {
      int agree = 0;
      double p = 0.5;
      for (int k = 0; k < n; ++k) {
        const bool a = (pattern >> k) & 1;
        agree += a ? 1 : 0;
        p *= a ? rho : 1 - rho;
      }
      const int votes_for_label = agree, votes_other = n - agree;
      int pred;
      if (votes_for_label > votes_other) pred = label;
      else if (votes_other > votes_for_label) pred = 1 - label;
      else pred = 0;
      acc += pred == label ? p : 0.0;
    }
  }
  return acc;
}

double plugin_mi(const std::vector<std::pair<int, int>>& xy) {
  std::map<int, double> px, py;
  std::map<std::pair<int, int>, double> pxy;
  const double n = static_cast<double>(xy.size());
  for (const auto& [x, y] : xy) {
    px[x] += 1 / n;
    py[y] += 1 / n;
    pxy[{x, y}] += 1 / n;
  }
  double mi = 0;
  for (const auto& [k, p] : pxy) mi += p * std::log(p / (px[k.first] * py[k.second]));
  return mi;
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("imo_test_datagen_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("generation is deterministic") {
  CorpusSpec spec;
  spec.n_train = 300;
  spec.n_validation = 50;
  spec.n_test = 50;
  const Corpus a = generate_corpus(spec), b = generate_corpus(spec);
  CHECK(to_jsonl(a.train, a.vocab) == to_jsonl(b.train, b.vocab));
  CHECK(to_jsonl(a.test, a.vocab) == to_jsonl(b.test, b.vocab));
  spec.seed = 1;
  CHECK(to_jsonl(generate_corpus(spec).train, a.vocab) != to_jsonl(a.train, a.vocab));
  // Splits are independent draws.
  CHECK(a.train[0].tokens != a.validation[0].tokens);
}

TEST_CASE("default corpus shape") {
  CorpusSpec spec;
  CHECK(spec.vocab_size() == 200);
  spec.n_train = 500;
  spec.n_validation = 10;
  spec.n_test = 10;
  const Corpus c = generate_corpus(spec);
  CHECK(c.train.size() == 500);
  CHECK(c.test.size() == 30);
  CHECK(domains_of(c.test) == std::vector<std::string>{"source", "target_a", "target_b"});
  for (const Example& e : c.train) {
    CHECK(e.tokens.size() >= 8);
    CHECK(e.tokens.size() <= 32);
    int causal = 0, spurious = 0;
    for (int t : e.tokens) {
      CHECK(t >= 0);
      CHECK(t < 200);
      causal += spec.causal_label(t) >= 0 ? 1 : 0;
      spurious += spec.spurious_label(t) >= 0 ? 1 : 0;
    }
    CHECK(causal == 2);
    CHECK(spurious == 4);
  }
}

TEST_CASE("perfect correlations give perfect votes") {
  CorpusSpec spec;
  spec.p_flip = 0.0;
  spec.domains = {{"source", 1.0}, {"flip", 0.0}};
  const auto src = generate(spec, "source", 2000, 0);
  CHECK(vote_accuracy(src, spec, true) == 1.0);
  CHECK(vote_accuracy(src, spec, false) == 1.0);
  CHECK(vote_accuracy(generate(spec, "flip", 2000, 0), spec, false) == 1.0);
}

TEST_CASE("majority vote at rho 0.5 over two spurious tokens") {
  CHECK(enumerate_vote_accuracy(2, 0.5) == 0.5);
  CorpusSpec spec;
  spec.n_spurious = 2;
  spec.domains = {{"source", 0.5}};
  const std::size_t n = 20000;
  const double acc = vote_accuracy(generate(spec, "source", n, 0), spec, true);
  CHECK(std::fabs(acc - 0.5) <= 3 * std::sqrt(0.25 / static_cast<double>(n)));
  // The enumeration also predicts other settings.
  spec.n_spurious = 3;
  spec.domains = {{"source", 0.8}};
  const double want = enumerate_vote_accuracy(3, 0.8);
  const double got = vote_accuracy(generate(spec, "source", n, 0), spec, true);
  CHECK(std::fabs(got - want) <= 3 * std::sqrt(want * (1 - want) / static_cast<double>(n)));
}

TEST_CASE("label marginal and spurious agreement within 3 sigma") {
  CorpusSpec spec;
  const std::size_t n = 5000;
  for (const DomainSpec& d : spec.domains) {
    CAPTURE(d.name);
    const auto data = generate(spec, d.name, n, 2);
    int ones = 0;
    long agree = 0, total = 0;
    for (const Example& e : data) {
      ones += e.label;
      for (int t : e.tokens) {
        const int y = spec.spurious_label(t);
        if (y < 0) continue;
        ++total;
        agree += y == e.label ? 1 : 0;
      }
    }
    CHECK(std::fabs(ones / double(n) - 0.5) <= 3 * std::sqrt(0.25 / n));
    const double rate = double(agree) / double(total);
    CHECK(std::fabs(rate - d.rho) <= 3 * std::sqrt(d.rho * (1 - d.rho) / double(total)) + 1e-12);
  }
}

TEST_CASE("per-example spurious agreement") {
  CorpusSpec spec;
  spec.spurious_mode = SpuriousMode::PerExample;
  for (const Example& e : generate(spec, "target_a", 200, 0)) {
    std::set<bool> seen;
    for (int t : e.tokens)
      if (spec.spurious_label(t) >= 0) seen.insert(spec.spurious_label(t) == e.label);
    CHECK(seen.size() == 1);
  }
}

TEST_CASE("corpus parameter validation") {
  auto field_of = [](CorpusSpec s) -> std::string {
    try {
      s.validate();
    } catch (const ConfigError& e) {
      return e.field;
    }
    return "";
  };
  CorpusSpec s;
  CHECK(field_of(s).empty());
  s.p_flip = 0.6;
  CHECK(field_of(s) == "corpus.p_flip");
  s = CorpusSpec{};
  s.t_min = 5;
  CHECK(field_of(s) == "corpus.t_min");
  s = CorpusSpec{};
  s.domains[1].rho = 1.5;
  CHECK(field_of(s) == "corpus.domains.1.rho");
  s = CorpusSpec{};
  s.source = "elsewhere";
  CHECK(field_of(s) == "corpus.domains");
  s = CorpusSpec{};
  CHECK(to_json(corpus_spec_from_json(to_json(s))) == to_json(s));
  CHECK_THROWS_AS(corpus_spec_from_json({{"spurious_mode", "sometimes"}}), ConfigError);
}

TEST_CASE("two-feature task") {
  const auto data = two_feature_task(0, 10000);
  std::vector<std::pair<int, int>> ay, by;
  for (const Example& e : data) {
    REQUIRE(e.tokens.size() == 2);
    CHECK(e.tokens[0] == (e.label == 0 ? kA0 : kA1));
    ay.emplace_back(e.tokens[0], e.label);
    by.emplace_back(e.tokens[1], e.label);
  }
  CHECK(plugin_mi(by) < 0.01);
  CHECK(std::fabs(plugin_mi(ay) - std::log(2.0)) < 0.01);
}

TEST_CASE("two-feature model passes embeddings through") {
  Model m = two_feature_model(3);
  const auto states = m.encode_states({kA1, kB0}, {});
  CHECK(states.back().data == std::vector<double>{0, 1, 0, 0, 0, 0, 1, 0});
  for (Parameter* p : m.backbone_parameters()) CHECK_FALSE(p->trainable);
}

TEST_CASE("JSONL loading") {
  const fs::path dir = scratch("jsonl");
  const std::string one = (dir / "one.jsonl").string();
  write_file(one, "{\"text\":\"Good movie\",\"label\":1,\"domain\":\"imdb\"}\n");
  const auto raw = read_jsonl(one, 2);
  REQUIRE(raw.size() == 1);
  CHECK(raw[0].words == std::vector<std::string>{"good", "movie"});
  CHECK(raw[0].domain == "imdb");

  const Vocabulary vocab = Vocabulary::build(raw);
  CHECK(vocab.words.front() == "<unk>");
  const auto ex = encode_examples(raw, vocab, 64);
  CHECK(ex[0].tokens.size() == 2);
  CHECK(ex[0].label == 1);

  const std::string test = (dir / "test.jsonl").string();
  write_file(test, "{\"text\":\"great movie\",\"label\":0,\"domain\":\"yelp\"}\n");
  const auto enc = encode_examples(read_jsonl(test, 2), vocab, 64);
  CHECK(enc[0].tokens[0] == Vocabulary::kUnk);
  CHECK(enc[0].tokens[1] == vocab.id("movie"));
  CHECK(encode_examples(raw, vocab, 1)[0].tokens.size() == 1);

  const std::string empty = (dir / "empty.jsonl").string();
  write_file(empty, "");
  CHECK_THROWS_AS(read_jsonl(empty, 2), InputError);

  const std::string bad = (dir / "bad.jsonl").string();
  write_file(bad, "{\"text\":\"a\",\"label\":0}\n{not json\n");
  try {
    read_jsonl(bad, 2);
    FAIL("expected input error");
  } catch (const InputError& e) {
    CHECK(std::string(e.what()).find(":2:") != std::string::npos);
  }
  const std::string label = (dir / "label.jsonl").string();
  write_file(label, "{\"text\":\"a\",\"label\":5}\n");
  CHECK_THROWS_AS(read_jsonl(label, 2), InputError);
  fs::remove_all(dir);
}

TEST_CASE("vocabulary ordering and cutoff") {
  std::vector<RawExample> raw{{{"b", "a", "a", "c"}, 0, ""}, {{"b", "a", "d"}, 1, ""}};
  const Vocabulary v = Vocabulary::build(raw);
  CHECK(v.words == std::vector<std::string>{"<unk>", "a", "b", "c", "d"});
  const Vocabulary cut = Vocabulary::build(raw, 2);
  CHECK(cut.words == std::vector<std::string>{"<unk>", "a", "b"});
  CHECK(cut.id("c") == Vocabulary::kUnk);
}

TEST_CASE("corpus on disk") {
  CorpusSpec spec;
  spec.n_train = 50;
  spec.n_validation = 10;
  spec.n_test = 10;
  const Corpus c = generate_corpus(spec);
  const fs::path dir = scratch("disk");
  const auto manifest = write_corpus(spec, c, dir.string());
  CHECK(manifest["format"] == "imo-corpus/1");
  CHECK(manifest["files"]["test.jsonl"]["examples"] == 30);
  CHECK(manifest["files"]["train.jsonl"]["sha1"] == sha1_hex(read_file((dir / "train.jsonl").string())));
  // Reloading by name reproduces the token sequences.
  const auto raw = read_jsonl((dir / "train.jsonl").string(), 2);
  REQUIRE(raw.size() == 50);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    CHECK(raw[i].label == c.train[i].label);
    REQUIRE(raw[i].words.size() == c.train[i].tokens.size());
    for (std::size_t k = 0; k < raw[i].words.size(); ++k)
      CHECK(raw[i].words[k] == c.vocab[static_cast<std::size_t>(c.train[i].tokens[k])]);
  }
  fs::remove_all(dir);
}
