#pragma once

// Synthetic paired speech/transcript corpus plus a text-only corpus for
// language-model pretraining. Each content token owns a fixed Gaussian
// template vector; an utterance is the concatenation of its tokens'
// templates, each repeated for a random duration, under additive noise.
// Text sentences come from a first-order Markov chain so their exact
// likelihood is computable.

#include "pasr/common.hpp"
#include "pasr/vocab.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace pasr {

struct CorpusConfig {
  int vocab_size = 16;
  int feature_dim = 16;
  int dur_min = 32;
  int dur_max = 48;
  double noise_sigma = 0.3;
  int len_min = 5;
  int len_max = 15;
  int train_utterances = 2000;
  int dev_utterances = 200;
  int test_utterances = 200;

  int lm_train_sentences = 4000;
  int lm_dev_sentences = 400;
  double text_temperature = 1.0;
  int text_len_min = 5;
  int text_len_max = 15;

  void validate() const;
  static CorpusConfig from_json(const nlohmann::json& j);
};

struct Utterance {
  std::string utterance_id;
  MatF features;              // frames x dim
  std::vector<int> transcript;  // content ids
};

struct Corpus {
  Vocabulary vocab;
  std::vector<Utterance> train, dev, test;
  std::vector<std::vector<int>> lm_train, lm_dev;

  const std::vector<Utterance>& split(const std::string& name) const;
};

// Side channel kept out of persistence: ground truth for generation-time
// oracles.
struct GeneratedCorpus {
  Corpus corpus;
  MatF templates;  // vocab_size x feature_dim
  // per-frame generating token, aligned with corpus.train/dev/test order
  std::vector<std::vector<int>> frame_labels;
};

struct TextCorpus {
  std::vector<std::vector<int>> train, dev;
  MatD start_logp;       // 1 x V
  MatD transition_logp;  // V x V, row = current token
};

GeneratedCorpus generate_corpus(const CorpusConfig& cfg, uint32_t seed);
TextCorpus generate_text_corpus(const CorpusConfig& cfg, uint32_t seed);

void save_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus load_corpus(const std::filesystem::path& dir);

}  // namespace pasr
