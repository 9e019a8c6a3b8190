#include "imo/datagen.hpp"

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "imo/errors.hpp"
#include "imo/io.hpp"
#include "imo/json_util.hpp"
#include "imo/model.hpp"
#include "imo/rng.hpp"

namespace imo {

using nlohmann::json;

const DomainSpec& CorpusSpec::domain(const std::string& name) const {
  for (const DomainSpec& d : domains) {
    if (d.name == name) return d;
  }
  throw ConfigError("corpus.domains", "no domain named '" + name + "'");
}

void CorpusSpec::validate() const {
  auto at_least = [](int v, int lo, const char* field) {
    if (v < lo) throw ConfigError(std::string("corpus.") + field, "must be >= " + std::to_string(lo));
  };
  at_least(n_labels, 2, "n_labels");
  at_least(causal_per_label, 1, "causal_per_label");
  at_least(spurious_per_label, 1, "spurious_per_label");
  at_least(n_filler, 0, "n_filler");
  at_least(n_causal, 0, "n_causal");
  at_least(n_spurious, 0, "n_spurious");
  at_least(t_min, 1, "t_min");
  at_least(n_train, 0, "n_train");
  at_least(n_validation, 0, "n_validation");
  at_least(n_test, 0, "n_test");
  if (t_max < t_min) throw ConfigError("corpus.t_max", "must be >= t_min");
  if (t_min < n_causal + n_spurious) {
    throw ConfigError("corpus.t_min", "must be >= n_causal + n_spurious");
  }
  if (n_filler == 0 && t_max > n_causal + n_spurious) {
    throw ConfigError("corpus.n_filler", "filler tokens needed for t_max > n_causal + n_spurious");
  }
  if (!(p_flip >= 0.0 && p_flip <= 0.5)) throw ConfigError("corpus.p_flip", "must lie in [0, 0.5]");
  if (domains.empty()) throw ConfigError("corpus.domains", "at least one domain required");
  for (std::size_t i = 0; i < domains.size(); ++i) {
    const std::string field = "corpus.domains." + std::to_string(i);
    if (domains[i].name.empty()) throw ConfigError(field + ".name", "must be non-empty");
    if (!(domains[i].rho >= 0.0 && domains[i].rho <= 1.0)) {
      throw ConfigError(field + ".rho", "must lie in [0, 1]");
    }
    for (std::size_t j = 0; j < i; ++j) {
      if (domains[j].name == domains[i].name) throw ConfigError(field + ".name", "duplicate");
    }
  }
  domain(source);
}

int CorpusSpec::causal_label(int token) const {
  if (token < 0 || token >= n_labels * causal_per_label) return -1;
  return token / causal_per_label;
}

int CorpusSpec::spurious_label(int token) const {
  const int base = n_labels * causal_per_label;
  if (token < base || token >= base + n_labels * spurious_per_label) return -1;
  return (token - base) / spurious_per_label;
}

json to_json(const CorpusSpec& s) {
  json domains = json::array();
  for (const DomainSpec& d : s.domains) domains.push_back({{"name", d.name}, {"rho", d.rho}});
  return json{{"n_labels", s.n_labels},
              {"causal_per_label", s.causal_per_label},
              {"spurious_per_label", s.spurious_per_label},
              {"n_filler", s.n_filler},
              {"t_min", s.t_min},
              {"t_max", s.t_max},
              {"n_causal", s.n_causal},
              {"n_spurious", s.n_spurious},
              {"p_flip", s.p_flip},
              {"domains", domains},
              {"source", s.source},
              {"n_train", s.n_train},
              {"n_validation", s.n_validation},
              {"n_test", s.n_test},
              {"spurious_mode",
               s.spurious_mode == SpuriousMode::PerToken ? "per_token" : "per_example"},
              {"seed", s.seed}};
}

CorpusSpec corpus_spec_from_json(const json& j) {
  CorpusSpec s;
  const std::string p = "corpus";
  s.n_labels = json_get(j, "n_labels", s.n_labels, p);
  s.causal_per_label = json_get(j, "causal_per_label", s.causal_per_label, p);
  s.spurious_per_label = json_get(j, "spurious_per_label", s.spurious_per_label, p);
  s.n_filler = json_get(j, "n_filler", s.n_filler, p);
  s.t_min = json_get(j, "t_min", s.t_min, p);
  s.t_max = json_get(j, "t_max", s.t_max, p);
  s.n_causal = json_get(j, "n_causal", s.n_causal, p);
  s.n_spurious = json_get(j, "n_spurious", s.n_spurious, p);
  s.p_flip = json_get(j, "p_flip", s.p_flip, p);
  if (j.contains("domains")) {
    if (!j.at("domains").is_array()) throw ConfigError("corpus.domains", "expected an array");
    s.domains.clear();
    for (std::size_t i = 0; i < j.at("domains").size(); ++i) {
      const std::string dp = "corpus.domains." + std::to_string(i);
      const json& d = j.at("domains")[i];
      s.domains.push_back({json_get(d, "name", std::string(), dp), json_get(d, "rho", 0.5, dp)});
    }
  }
  s.source = json_get(j, "source", s.source, p);
  s.n_train = json_get(j, "n_train", s.n_train, p);
  s.n_validation = json_get(j, "n_validation", s.n_validation, p);
  s.n_test = json_get(j, "n_test", s.n_test, p);
  const std::string mode = json_get(j, "spurious_mode", std::string("per_token"), p);
  if (mode == "per_token") {
    s.spurious_mode = SpuriousMode::PerToken;
  } else if (mode == "per_example") {
    s.spurious_mode = SpuriousMode::PerExample;
  } else {
    throw ConfigError("corpus.spurious_mode", "unknown mode '" + mode + "'");
  }
  s.seed = json_get(j, "seed", s.seed, p);
  s.validate();
  return s;
}

namespace {

int uniform_int(Rng& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

bool bernoulli(Rng& rng, double p) { return std::uniform_real_distribution<double>(0, 1)(rng) < p; }

/// A label other than `label`, uniformly.
int other_label(Rng& rng, int label, int n_labels) {
  int o = uniform_int(rng, 0, n_labels - 2);
  return o >= label ? o + 1 : o;
}

std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

std::vector<Example> generate(const CorpusSpec& spec, const std::string& domain, std::size_t n,
                              std::uint64_t stream) {
  spec.validate();
  const DomainSpec& dom = spec.domain(domain);
  Rng rng(derive_seed(derive_seed(spec.seed, name_hash(domain)), stream));
  const int spurious_base = spec.n_labels * spec.causal_per_label;
  const int filler_base = spurious_base + spec.n_labels * spec.spurious_per_label;

  std::vector<Example> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Example ex;
    ex.domain = domain;
    ex.label = uniform_int(rng, 0, spec.n_labels - 1);
    const int len = uniform_int(rng, spec.t_min, spec.t_max);
    ex.tokens.reserve(static_cast<std::size_t>(len));
    for (int c = 0; c < spec.n_causal; ++c) {
      const int y = bernoulli(rng, spec.p_flip) ? other_label(rng, ex.label, spec.n_labels)
                                                : ex.label;
      ex.tokens.push_back(y * spec.causal_per_label +
                          uniform_int(rng, 0, spec.causal_per_label - 1));
    }
    const bool example_agrees = bernoulli(rng, dom.rho);
    for (int c = 0; c < spec.n_spurious; ++c) {
      const bool agrees =
          spec.spurious_mode == SpuriousMode::PerExample ? example_agrees : bernoulli(rng, dom.rho);
      const int y = agrees ? ex.label : other_label(rng, ex.label, spec.n_labels);
      ex.tokens.push_back(spurious_base + y * spec.spurious_per_label +
                          uniform_int(rng, 0, spec.spurious_per_label - 1));
    }
    while (static_cast<int>(ex.tokens.size()) < len) {
      ex.tokens.push_back(filler_base + uniform_int(rng, 0, spec.n_filler - 1));
    }
    std::shuffle(ex.tokens.begin(), ex.tokens.end(), rng);
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<std::string> synthetic_vocab(const CorpusSpec& spec) {
  std::vector<std::string> v;
  v.reserve(static_cast<std::size_t>(spec.vocab_size()));
  for (int y = 0; y < spec.n_labels; ++y)
    for (int k = 0; k < spec.causal_per_label; ++k)
      v.push_back("c" + std::to_string(y) + "_" + std::to_string(k));
  for (int y = 0; y < spec.n_labels; ++y)
    for (int k = 0; k < spec.spurious_per_label; ++k)
      v.push_back("s" + std::to_string(y) + "_" + std::to_string(k));
  for (int k = 0; k < spec.n_filler; ++k) v.push_back("f" + std::to_string(k));
  return v;
}

Corpus generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  Corpus c;
  c.n_labels = spec.n_labels;
  c.vocab = synthetic_vocab(spec);
  c.train = generate(spec, spec.source, static_cast<std::size_t>(spec.n_train), 0);
  c.validation = generate(spec, spec.source, static_cast<std::size_t>(spec.n_validation), 1);
  for (const DomainSpec& d : spec.domains) {
    std::vector<Example> t = generate(spec, d.name, static_cast<std::size_t>(spec.n_test), 2);
    c.test.insert(c.test.end(), std::make_move_iterator(t.begin()),
                  std::make_move_iterator(t.end()));
  }
  return c;
}

std::vector<std::string> domains_of(const std::vector<Example>& examples) {
  std::vector<std::string> out;
  for (const Example& e : examples) {
    if (std::find(out.begin(), out.end(), e.domain) == out.end()) out.push_back(e.domain);
  }
  return out;
}

std::vector<Example> filter_domain(const std::vector<Example>& examples,
                                   const std::string& domain) {
  std::vector<Example> out;
  for (const Example& e : examples) {
    if (e.domain == domain) out.push_back(e);
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<Example> two_feature_task(std::uint64_t seed, std::size_t n) {
  Rng rng(derive_seed(seed, 7));
  std::vector<Example> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = uniform_int(rng, 0, 1);
    const int b = uniform_int(rng, 0, 1);
    out.push_back({{y == 0 ? kA0 : kA1, b == 0 ? kB0 : kB1}, y, "two_feature"});
  }
  return out;
}

Model two_feature_model(std::uint64_t seed) {
  ModelConfig config;
  config.encoder.vocab_size = 4;
  config.encoder.d_model = 4;
  config.encoder.n_layers = 1;
  config.encoder.n_heads = 1;
  config.encoder.d_ff = 4;
  config.encoder.max_len = 2;
  config.encoder.seed = seed;
  Model model(config);
  Encoder& enc = model.encoder();
  // One-hot rows. The head is even in e and has no bias, so each label needs
  // its own direction.
  enc.token_embedding.value = Tensor::matrix(4, 4, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
  enc.position_embedding.value.fill(0.0);
  // With zero output projections both residual branches vanish: H^1 = X.
  enc.layers[0].wo.value.fill(0.0);
  enc.layers[0].w2.value.fill(0.0);
  model.set_backbone_trainable(false);
  model.set_mask_depth({1});
  return model;
}

// ---------------------------------------------------------------------------

std::vector<RawExample> read_jsonl(const std::string& path, int n_labels) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path);
  std::vector<RawExample> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path + ":" + std::to_string(lineno);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error&) {
      throw InputError(where + ": malformed JSON");
    }
    if (!j.is_object() || !j.contains("text") || !j["text"].is_string() ||
        !j.contains("label") || !j["label"].is_number_integer()) {
      throw InputError(where + ": expected {\"text\": string, \"label\": integer, \"domain\": string}");
    }
    RawExample ex;
    ex.label = j["label"].get<int>();
    if (ex.label < 0 || ex.label >= n_labels) {
      throw InputError(where + ": label " + std::to_string(ex.label) + " outside 0.." +
                       std::to_string(n_labels - 1));
    }
    if (j.contains("domain")) {
      if (!j["domain"].is_string()) throw InputError(where + ": domain must be a string");
      ex.domain = j["domain"].get<std::string>();
    }
    std::string text = j["text"].get<std::string>();
    for (char& c : text) {
      if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    }
    std::istringstream words(text);
    std::string w;
    while (words >> w) ex.words.push_back(w);
    out.push_back(std::move(ex));
  }
  if (out.empty()) throw InputError(path + ": no examples");
  return out;
}

Vocabulary Vocabulary::build(const std::vector<RawExample>& examples, int min_freq) {
  std::map<std::string, int> counts;
  for (const RawExample& e : examples)
    for (const std::string& w : e.words) ++counts[w];
  std::vector<std::pair<std::string, int>> sorted(counts.begin(), counts.end());
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary v;
  v.words.push_back("<unk>");
  for (const auto& [w, c] : sorted) {
    if (c < min_freq) continue;
    v.index[w] = static_cast<int>(v.words.size());
    v.words.push_back(w);
  }
  return v;
}

int Vocabulary::id(const std::string& word) const {
  auto it = index.find(word);
  return it == index.end() ? kUnk : it->second;
}

std::vector<Example> encode_examples(const std::vector<RawExample>& raw, const Vocabulary& vocab,
                                     int max_len) {
  std::vector<Example> out;
  out.reserve(raw.size());
  for (const RawExample& r : raw) {
    Example e;
    e.label = r.label;
    e.domain = r.domain;
    for (const std::string& w : r.words) {
      if (static_cast<int>(e.tokens.size()) >= max_len) break;
      e.tokens.push_back(vocab.id(w));
    }
    out.push_back(std::move(e));
  }
  return out;
}

std::string to_jsonl(const std::vector<Example>& examples, const std::vector<std::string>& vocab) {
  std::string out;
  for (const Example& e : examples) {
    std::string text;
    for (std::size_t i = 0; i < e.tokens.size(); ++i) {
      if (i) text.push_back(' ');
      text += vocab.at(static_cast<std::size_t>(e.tokens[i]));
    }
    out += json{{"text", text}, {"label", e.label}, {"domain", e.domain}}.dump();
    out.push_back('\n');
  }
  return out;
}

json write_corpus(const CorpusSpec& spec, const Corpus& corpus, const std::string& dir) {
  std::filesystem::create_directories(dir);
  json files = json::object();
  const std::pair<const char*, const std::vector<Example>*> splits[] = {
      {"train.jsonl", &corpus.train},
      {"validation.jsonl", &corpus.validation},
      {"test.jsonl", &corpus.test}};
  for (const auto& [name, examples] : splits) {
    const std::string text = to_jsonl(*examples, corpus.vocab);
    write_file(dir + "/" + name, text);
    files[name] = {{"examples", examples->size()}, {"sha1", sha1_hex(text)}};
  }
  json manifest{{"format", "imo-corpus/1"},
                {"spec", to_json(spec)},
                {"seed", spec.seed},
                {"n_labels", corpus.n_labels},
                {"files", files}};
  write_file(dir + "/manifest.json", manifest.dump(2) + "\n");
  return manifest;
}

}  // namespace imo
