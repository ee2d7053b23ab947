#include "pasr/corpus.hpp"

#include <json.hpp>

#include <bit>
#include <fstream>
#include <random>

namespace pasr {

static_assert(std::endian::native == std::endian::little,
              "feature blobs are little-endian");

using nlohmann::json;

void CorpusConfig::validate() const {
  if (vocab_size < 4) throw ConfigError("vocab_size must be >= 4");
  if (feature_dim < 1) throw ConfigError("feature_dim must be >= 1");
  if (dur_min < 1) throw ConfigError("dur_min must be >= 1 frame");
  if (dur_max < dur_min) throw ConfigError("dur_max < dur_min");
  if (len_min < 1 || len_max < len_min) throw ConfigError("bad transcript length range");
  if (noise_sigma < 0) throw ConfigError("noise_sigma must be >= 0");
  if (train_utterances < 0 || dev_utterances < 0 || test_utterances < 0)
    throw ConfigError("negative utterance count");
  if (text_temperature < 0) throw ConfigError("text_temperature must be >= 0");
  if (text_len_min < 1 || text_len_max < text_len_min)
    throw ConfigError("bad text length range");
}

CorpusConfig CorpusConfig::from_json(const json& j) {
  CorpusConfig c;
  static const char* known[] = {
      "vocab_size",      "feature_dim",       "dur_min",
      "dur_max",         "noise_sigma",       "len_min",
      "len_max",         "train_utterances",  "dev_utterances",
      "test_utterances", "lm_train_sentences", "lm_dev_sentences",
      "text_temperature", "text_len_min",     "text_len_max"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) throw ConfigError("unknown corpus option '" + it.key() + "'");
  }
  try {
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.feature_dim = j.value("feature_dim", c.feature_dim);
    c.dur_min = j.value("dur_min", c.dur_min);
    c.dur_max = j.value("dur_max", c.dur_max);
    c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
    c.len_min = j.value("len_min", c.len_min);
    c.len_max = j.value("len_max", c.len_max);
    c.train_utterances = j.value("train_utterances", c.train_utterances);
    c.dev_utterances = j.value("dev_utterances", c.dev_utterances);
    c.test_utterances = j.value("test_utterances", c.test_utterances);
    c.lm_train_sentences = j.value("lm_train_sentences", c.lm_train_sentences);
    c.lm_dev_sentences = j.value("lm_dev_sentences", c.lm_dev_sentences);
    c.text_temperature = j.value("text_temperature", c.text_temperature);
    c.text_len_min = j.value("text_len_min", c.text_len_min);
    c.text_len_max = j.value("text_len_max", c.text_len_max);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("corpus config: ") + e.what());
  }
  c.validate();
  return c;
}

const std::vector<Utterance>& Corpus::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "dev") return dev;
  if (name == "test") return test;
  throw ConfigError("unknown split '" + name + "'");
}

// ─── generation ─────────────────────────────────────────────────────────────

namespace {

Utterance make_utterance(const std::string& id, const MatF& templates,
                         const CorpusConfig& cfg, Rng& rng,
                         std::vector<int>& frame_labels_out) {
  std::uniform_int_distribution<int> len_d(cfg.len_min, cfg.len_max);
  std::uniform_int_distribution<int> tok_d(0, cfg.vocab_size - 1);
  std::uniform_int_distribution<int> dur_d(cfg.dur_min, cfg.dur_max);
  std::normal_distribution<double> noise(0.0, cfg.noise_sigma);

  Utterance u;
  u.utterance_id = id;
  const int L = len_d(rng);
  u.transcript.reserve(L);
  std::vector<int> durations;
  durations.reserve(L);
  int frames = 0;
  for (int i = 0; i < L; ++i) {
    u.transcript.push_back(tok_d(rng));
    durations.push_back(dur_d(rng));
    frames += durations.back();
  }
  u.features.resize(frames, cfg.feature_dim);
  frame_labels_out.clear();
  frame_labels_out.reserve(frames);
  int f = 0;
  for (int i = 0; i < L; ++i)
    for (int d = 0; d < durations[i]; ++d, ++f) {
      for (int c = 0; c < cfg.feature_dim; ++c)
        u.features(f, c) =
            templates(u.transcript[i], c) + static_cast<float>(noise(rng));
      frame_labels_out.push_back(u.transcript[i]);
    }
  return u;
}

}  // namespace

GeneratedCorpus generate_corpus(const CorpusConfig& cfg, uint32_t seed) {
  cfg.validate();
  Rng rng(seed);
  GeneratedCorpus g;
  g.corpus.vocab = Vocabulary::numbered(cfg.vocab_size);
  g.templates = random_normal<float>(cfg.vocab_size, cfg.feature_dim, rng, 1.0);

  auto fill = [&](std::vector<Utterance>& out, const char* prefix, int count) {
    out.reserve(count);
    for (int i = 0; i < count; ++i) {
      char id[32];
      std::snprintf(id, sizeof id, "%s-%05d", prefix, i);
      std::vector<int> labels;
      out.push_back(make_utterance(id, g.templates, cfg, rng, labels));
      g.frame_labels.push_back(std::move(labels));
    }
  };
  fill(g.corpus.train, "train", cfg.train_utterances);
  fill(g.corpus.dev, "dev", cfg.dev_utterances);
  fill(g.corpus.test, "test", cfg.test_utterances);

  TextCorpus text = generate_text_corpus(cfg, seed + 1);
  g.corpus.lm_train = std::move(text.train);
  g.corpus.lm_dev = std::move(text.dev);
  return g;
}

TextCorpus generate_text_corpus(const CorpusConfig& cfg, uint32_t seed) {
  cfg.validate();
  Rng rng(seed);
  const int V = cfg.vocab_size;
  TextCorpus tc;
  MatD start = random_normal<double>(1, V, rng, 1.0);
  MatD trans = random_normal<double>(V, V, rng, 1.0);

  // temperature scales logits; 0 collapses each row onto its argmax
  auto to_logp = [&](MatD m) {
    if (cfg.text_temperature == 0.0) {
      for (int i = 0; i < m.rows(); ++i) {
        int best = 0;
        m.row(i).maxCoeff(&best);
        for (int j = 0; j < m.cols(); ++j)
          m(i, j) = j == best ? 0.0 : neg_inf<double>();
      }
      return m;
    }
    m /= cfg.text_temperature;
    for (int i = 0; i < m.rows(); ++i) log_softmax_row<double>(m.row(i));
    return m;
  };
  tc.start_logp = to_logp(start);
  tc.transition_logp = to_logp(trans);

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto sample_row = [&](const MatD& logp, int row) {
    double u = unit(rng), acc = 0;
    int last = static_cast<int>(logp.cols()) - 1;
    for (int j = 0; j < logp.cols(); ++j) {
      acc += std::exp(logp(row, j));
      if (u < acc) return j;
    }
    return last;
  };
  auto gen_sentence = [&]() {
    std::vector<int> s;
    s.push_back(sample_row(tc.start_logp, 0));
    while (true) {
      int len = static_cast<int>(s.size());
      double p_end =
          len < cfg.text_len_min
              ? 0.0
              : double(len - cfg.text_len_min + 1) /
                    double(cfg.text_len_max - cfg.text_len_min + 1);
      if (unit(rng) < p_end) break;
      s.push_back(sample_row(tc.transition_logp, s.back()));
    }
    return s;
  };
  tc.train.reserve(cfg.lm_train_sentences);
  for (int i = 0; i < cfg.lm_train_sentences; ++i) tc.train.push_back(gen_sentence());
  tc.dev.reserve(cfg.lm_dev_sentences);
  for (int i = 0; i < cfg.lm_dev_sentences; ++i) tc.dev.push_back(gen_sentence());
  return tc;
}

// ─── persistence ────────────────────────────────────────────────────────────

namespace {

void append_manifest(std::ostream& os, const Corpus& c,
                     const std::vector<Utterance>& utts, const char* split) {
  for (const auto& u : utts) {
    json line = {{"utterance_id", u.utterance_id},
                 {"split", split},
                 {"frames", static_cast<int>(u.features.rows())},
                 {"dim", static_cast<int>(u.features.cols())},
                 {"transcript", json::array()}};
    for (int t : u.transcript) line["transcript"].push_back(c.vocab.content_name(t));
    os << line.dump() << '\n';
  }
}

void append_text(std::ostream& os, const Corpus& c,
                 const std::vector<std::vector<int>>& sents, const char* split) {
  for (const auto& s : sents) {
    json line = {{"split", split}, {"tokens", json::array()}};
    for (int t : s) line["tokens"].push_back(c.vocab.content_name(t));
    os << line.dump() << '\n';
  }
}

}  // namespace

void save_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create '" + dir.string() + "': " + ec.message());

  {
    std::ofstream os(dir / "vocab.json");
    if (!os) throw DataError("cannot write vocab.json");
    os << corpus.vocab.to_json().dump(2) << '\n';
  }
  {
    std::ofstream os(dir / "manifest.jsonl");
    if (!os) throw DataError("cannot write manifest.jsonl");
    append_manifest(os, corpus, corpus.train, "train");
    append_manifest(os, corpus, corpus.dev, "dev");
    append_manifest(os, corpus, corpus.test, "test");
  }
  {
    std::ofstream os(dir / "features.bin", std::ios::binary);
    if (!os) throw DataError("cannot write features.bin");
    for (const auto* split : {&corpus.train, &corpus.dev, &corpus.test})
      for (const auto& u : *split)
        os.write(reinterpret_cast<const char*>(u.features.data()),
                 static_cast<std::streamsize>(u.features.size() * sizeof(float)));
  }
  {
    std::ofstream os(dir / "text.jsonl");
    if (!os) throw DataError("cannot write text.jsonl");
    append_text(os, corpus, corpus.lm_train, "lm_train");
    append_text(os, corpus, corpus.lm_dev, "lm_dev");
  }
}

Corpus load_corpus(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::exists(dir / "manifest.jsonl") || !fs::exists(dir / "vocab.json") ||
      !fs::exists(dir / "features.bin"))
    throw DataError("'" + dir.string() + "' is not a corpus directory");

  Corpus c;
  {
    std::ifstream is(dir / "vocab.json");
    json j;
    try {
      is >> j;
    } catch (const json::exception& e) {
      throw FormatError(std::string("vocab.json: ") + e.what());
    }
    c.vocab = Vocabulary::from_json(j);
  }

  struct Entry {
    std::vector<Utterance>* home = nullptr;
    int index = 0;
    int frames = 0, dim = 0;
    Utterance& utt() const { return (*home)[index]; }
  };
  std::vector<Entry> order;
  {
    std::ifstream is(dir / "manifest.jsonl");
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty()) continue;
      json j;
      try {
        j = json::parse(line);
      } catch (const json::exception& e) {
        throw FormatError("manifest.jsonl line " + std::to_string(lineno) + ": " +
                          e.what());
      }
      Utterance u;
      int frames, dim;
      std::string split;
      try {
        u.utterance_id = j.at("utterance_id").get<std::string>();
        split = j.at("split").get<std::string>();
        frames = j.at("frames").get<int>();
        dim = j.at("dim").get<int>();
        for (const auto& s : j.at("transcript"))
          u.transcript.push_back(c.vocab.content_id(s.get<std::string>()));
      } catch (const json::exception& e) {
        throw FormatError("manifest.jsonl line " + std::to_string(lineno) + ": " +
                          e.what());
      }
      if (frames < 0 || dim <= 0)
        throw FormatError("manifest.jsonl line " + std::to_string(lineno) +
                          ": bad extents");
      if (frames < static_cast<int>(u.transcript.size()))
        throw DataError(u.utterance_id + ": " + std::to_string(frames) +
                        " frames cannot carry " +
                        std::to_string(u.transcript.size()) + " tokens");
      std::vector<Utterance>* dst =
          split == "train" ? &c.train
          : split == "dev" ? &c.dev
          : split == "test" ? &c.test
                            : nullptr;
      if (!dst)
        throw FormatError("manifest.jsonl line " + std::to_string(lineno) +
                          ": unknown split '" + split + "'");
      dst->push_back(std::move(u));
      order.push_back({dst, static_cast<int>(dst->size()) - 1, frames, dim});
    }
  }

  {
    std::ifstream is(dir / "features.bin", std::ios::binary);
    is.seekg(0, std::ios::end);
    const std::int64_t actual = is.tellg();
    std::int64_t expected = 0;
    for (const auto& e : order)
      expected += std::int64_t(e.frames) * e.dim * sizeof(float);
    if (actual != expected)
      throw FormatError("features.bin holds " + std::to_string(actual) +
                        " bytes, manifest implies " + std::to_string(expected) +
                        (actual < expected
                             ? "; blob truncated at byte " + std::to_string(actual)
                             : ""));
    is.seekg(0);
    for (const auto& e : order) {
      Utterance& u = e.utt();
      u.features.resize(e.frames, e.dim);
      is.read(reinterpret_cast<char*>(u.features.data()),
              static_cast<std::streamsize>(std::int64_t(e.frames) * e.dim *
                                           sizeof(float)));
      if (!is) throw FormatError("features.bin: short read for " + u.utterance_id);
    }
  }

  if (fs::exists(dir / "text.jsonl")) {
    std::ifstream is(dir / "text.jsonl");
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty()) continue;
      json j;
      try {
        j = json::parse(line);
      } catch (const json::exception& e) {
        throw FormatError("text.jsonl line " + std::to_string(lineno) + ": " +
                          e.what());
      }
      std::vector<int> s;
      for (const auto& tok : j.at("tokens"))
        s.push_back(c.vocab.content_id(tok.get<std::string>()));
      const std::string split = j.at("split").get<std::string>();
      if (split == "lm_train")
        c.lm_train.push_back(std::move(s));
      else if (split == "lm_dev")
        c.lm_dev.push_back(std::move(s));
      else
        throw FormatError("text.jsonl line " + std::to_string(lineno) +
                          ": unknown split '" + split + "'");
    }
  }
  return c;
}

}  // namespace pasr
