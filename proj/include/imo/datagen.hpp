#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

namespace imo {

class Model;

struct Example {
  std::vector<int> tokens;
  int label = 0;
  std::string domain;
};

struct DomainSpec {
  std::string name;
  double rho = 0.5;  ///< probability a spurious token agrees with the label
};

enum class SpuriousMode {
  PerToken,    ///< each spurious token agrees with the label independently
  PerExample,  ///< one draw per example decides agreement for all of them
};

/// Generative parameters of a synthetic domain-shift corpus. Token ids are
/// laid out as [causal | spurious | filler], label-major inside the first two.
struct CorpusSpec {
  int n_labels = 2;
  int causal_per_label = 8;
  int spurious_per_label = 16;
  int n_filler = 152;
  int t_min = 8;
  int t_max = 32;
  int n_causal = 2;
  int n_spurious = 4;
  double p_flip = 0.05;
  std::vector<DomainSpec> domains{{"source", 0.95}, {"target_a", 0.5}, {"target_b", 0.05}};
  std::string source = "source";
  int n_train = 10000;
  int n_validation = 1000;
  int n_test = 2000;  ///< per domain
  SpuriousMode spurious_mode = SpuriousMode::PerToken;
  std::uint64_t seed = 0;

  int vocab_size() const { return n_labels * (causal_per_label + spurious_per_label) + n_filler; }
  const DomainSpec& domain(const std::string& name) const;
  void validate() const;

  /// Label owning a causal / spurious token id, or -1.
  int causal_label(int token) const;
  int spurious_label(int token) const;
};

nlohmann::json to_json(const CorpusSpec& spec);
CorpusSpec corpus_spec_from_json(const nlohmann::json& j);

/// `n` examples of `domain`. `stream` separates independent draws (splits)
/// under the same spec seed.
std::vector<Example> generate(const CorpusSpec& spec, const std::string& domain, std::size_t n,
                              std::uint64_t stream);

struct Corpus {
  std::vector<Example> train;       ///< source domain
  std::vector<Example> validation;  ///< source domain
  std::vector<Example> test;        ///< every domain, `n_test` each
  std::vector<std::string> vocab;   ///< id -> token text
  int n_labels = 2;
};

Corpus generate_corpus(const CorpusSpec& spec);
/// Token names: c{label}_{k}, s{label}_{k}, f{k}.
std::vector<std::string> synthetic_vocab(const CorpusSpec& spec);

/// Distinct domain names of `examples` in first-seen order.
std::vector<std::string> domains_of(const std::vector<Example>& examples);
std::vector<Example> filter_domain(const std::vector<Example>& examples, const std::string& domain);

// ---------------------------------------------------------------------------
// Two-feature pruning task

/// Token ids of the two-feature task: A0, A1 decide the label; B0, B1 are
/// drawn independently of it.
enum TwoFeatureToken { kA0 = 0, kA1 = 1, kB0 = 2, kB1 = 3 };

/// Sequences [A_y, B_b] with y, b independent fair coins.
std::vector<Example> two_feature_task(std::uint64_t seed, std::size_t n = 2000);

/// A one-layer model whose encoder passes embeddings through unchanged and
/// whose embeddings are one-hot: A0, A1 on features 0, 1 (the causal channel)
/// and B0, B1 on features 2, 3. Only the top mask and the head are trainable.
Model two_feature_model(std::uint64_t seed);

// ---------------------------------------------------------------------------
// JSONL

struct RawExample {
  std::vector<std::string> words;
  int label = 0;
  std::string domain;
};

/// Lines of {"text", "label", "domain"}. Text is ASCII-lowercased and split on
/// whitespace. Errors carry the 1-based line number.
std::vector<RawExample> read_jsonl(const std::string& path, int n_labels);

struct Vocabulary {
  static constexpr int kUnk = 0;
  std::vector<std::string> words;  ///< words[0] is "<unk>"
  std::unordered_map<std::string, int> index;

  /// Words with count >= min_freq, by descending count then text.
  static Vocabulary build(const std::vector<RawExample>& examples, int min_freq = 1);
  int id(const std::string& word) const;
  std::size_t size() const { return words.size(); }
};

/// Maps words to ids (unknown -> UNK) and truncates to `max_len`.
std::vector<Example> encode_examples(const std::vector<RawExample>& raw, const Vocabulary& vocab,
                                     int max_len);

std::string to_jsonl(const std::vector<Example>& examples, const std::vector<std::string>& vocab);

/// Writes train/validation/test JSONL and manifest.json into `dir`.
/// Returns the manifest.
nlohmann::json write_corpus(const CorpusSpec& spec, const Corpus& corpus, const std::string& dir);

}  // namespace imo
