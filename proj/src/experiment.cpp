#include "pasr/experiment.hpp"

#include "pasr/jsonschema.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <fstream>
#include <mutex>
#include <thread>

namespace pasr {

void ExperimentManifest::validate() const {
  if (corpus.empty()) throw ConfigError("experiment needs a corpus directory");
  if (models.empty())
    throw ConfigError("experiment needs at least one model entry");
  if (variants.empty())
    throw ConfigError("experiment needs at least one prompt variant");
  if (modes.empty())
    throw ConfigError("experiment needs at least one decode mode");
  for (const auto& v : variants) prompt_variant_from_string(v);
  for (const auto& m : modes)
    if (m != "stream" && m != "batch")
      throw ConfigError("unknown decode mode '" + m + "'");
  if (limit < 0) throw ConfigError("limit must be non-negative");
  if (threads < 1) throw ConfigError("threads must be positive");
  search.validate();
}

ExperimentManifest ExperimentManifest::from_json(const nlohmann::json& j) {
  ExperimentManifest m;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "corpus") {
        m.corpus = value.get<std::string>();
      } else if (key == "models") {
        if (!value.is_object())
          throw ConfigError(
              "models must map scheme labels to checkpoint directories");
        m.models.clear();
        for (const auto& [scheme, dir] : value.items())
          m.models[scheme] = dir.get<std::string>();
      } else if (key == "variants") {
        m.variants = value.get<std::vector<std::string>>();
      } else if (key == "modes") {
        m.modes = value.get<std::vector<std::string>>();
      } else if (key == "split") {
        m.split = value.get<std::string>();
      } else if (key == "limit") {
        m.limit = value.get<int>();
      } else if (key == "threads") {
        m.threads = value.get<int>();
      } else if (key == "seed") {
        m.seed = value.get<unsigned>();
      } else if (key == "beam") {
        m.search.beam = value.get<int>();
      } else if (key == "prefilter") {
        m.search.prefilter = value.get<int>();
      } else if (key == "lambda_ctc") {
        m.search.lambda_ctc = value.get<double>();
      } else if (key == "lambda_dec") {
        m.search.lambda_dec = value.get<double>();
      } else if (key == "lambda_lm") {
        m.search.lambda_lm = value.get<double>();
      } else if (key == "length_penalty") {
        m.search.length_penalty = value.get<double>();
      } else if (key == "frame_period_ms") {
        m.search.frame_period_ms = value.get<double>();
      } else if (key == "block_sleep_ms") {
        m.search.block_sleep_ms = value.get<double>();
      } else {
        throw ConfigError("unknown key experiment." + key);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("experiment manifest: ") + e.what());
  }
  m.validate();
  return m;
}

ExperimentManifest ExperimentManifest::from_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("experiment manifest '" + path + "' not found");
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("experiment manifest '" + path + "': " + e.what());
  }
  return from_json(j);
}

AsrModel<float> load_full_model(const std::string& dir) {
  nlohmann::json meta;
  try {
    meta = read_checkpoint_meta(dir);
  } catch (const DataError& e) {
    throw DataError(std::string(e.what()) +
                    "; expected a checkpoint directory written by finetune");
  }
  if (!meta.contains("model") || !meta.contains("vocab"))
    throw FormatError("checkpoint at '" + dir + "' lacks model metadata");
  if (meta.value("scope", "") != "all")
    throw DataError("checkpoint at '" + dir + "' has scope '" +
                    meta.value("scope", "?") +
                    "'; decoding needs the full 'all' scope from finetune");
  AsrModel<float> model;
  model.init(ModelConfig::from_json(meta["model"]), meta["vocab"].get<int>(),
             0);
  load_model(dir, model);
  return model;
}

std::vector<StreamResult> decode_split(AsrModel<float>& model,
                                       const std::vector<const Utterance*>& utts,
                                       const std::string& mode,
                                       const SearchConfig& cfg, int threads) {
  if (mode != "stream" && mode != "batch")
    throw ConfigError("unknown decode mode '" + mode + "'");
  const bool stream = mode == "stream";
  std::vector<StreamResult> results(utts.size());
  const int workers =
      std::max(1, std::min(threads, static_cast<int>(utts.size())));
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto run = [&]() {
    std::size_t i;
    while ((i = next.fetch_add(1)) < utts.size()) {
      try {
        results[i] = stream ? stream_decode(model, utts[i]->features, cfg)
                            : batch_decode(model, utts[i]->features, cfg);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mu);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };
  if (workers == 1) {
    run();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) pool.emplace_back(run);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
  return results;
}

double median(std::vector<double> v) {
  if (v.empty()) throw ContractError("median of an empty sample");
  std::sort(v.begin(), v.end());
  const std::size_t mid = v.size() / 2;
  if (v.size() % 2 == 1) return v[mid];
  return 0.5 * (v[mid - 1] + v[mid]);
}

namespace {

nlohmann::json cell_json(const CellResult& c) {
  return {{"scheme", c.scheme},
          {"variant", c.variant},
          {"mode", c.mode},
          {"utterances", c.utterances},
          {"wer",
           {{"substitutions", c.wer.substitutions},
            {"deletions", c.wer.deletions},
            {"insertions", c.wer.insertions},
            {"reference_length", c.wer.ref_len},
            {"rate", c.wer.rate()}}},
          {"rtf_p50", c.rtf_p50},
          {"ep50_s", c.ep50_s}};
}

}  // namespace

nlohmann::json ExperimentReport::to_json() const {
  nlohmann::json cells_j = nlohmann::json::array();
  for (const auto& c : cells) cells_j.push_back(cell_json(c));
  return {{"corpus", corpus},
          {"seed", seed},
          {"utterances", utterances},
          {"cells", cells_j}};
}

std::string ExperimentReport::table() const {
  std::string out;
  char line[160];
  std::snprintf(line, sizeof line, "%-14s %-8s %-7s %8s %5s %5s %5s %7s %9s %9s\n",
                "scheme", "variant", "mode", "WER", "S", "D", "I", "N",
                "RTF_p50", "EP50_ms");
  out += line;
  for (const auto& c : cells) {
    std::snprintf(line, sizeof line,
                  "%-14s %-8s %-7s %8.4f %5lld %5lld %5lld %7lld %9.4f %9.1f\n",
                  c.scheme.c_str(), c.variant.c_str(), c.mode.c_str(),
                  c.wer.rate(), c.wer.substitutions, c.wer.deletions,
                  c.wer.insertions, c.wer.ref_len, c.rtf_p50,
                  1000.0 * c.ep50_s);
    out += line;
  }
  return out;
}

nlohmann::json experiment_report_schema() {
  static const char* text = R"({
  "$schema": "http://json-schema.org/draft-07/schema#",
  "title": "Decode grid report",
  "type": "object",
  "required": ["corpus", "seed", "utterances", "cells"],
  "additionalProperties": false,
  "properties": {
    "corpus": {"type": "string"},
    "seed": {"type": "integer", "minimum": 0},
    "utterances": {"type": "integer", "minimum": 1},
    "cells": {
      "type": "array",
      "minItems": 1,
      "items": {
        "type": "object",
        "required": ["scheme", "variant", "mode", "utterances", "wer", "rtf_p50", "ep50_s"],
        "additionalProperties": false,
        "properties": {
          "scheme": {"type": "string"},
          "variant": {"type": "string", "enum": ["ctc", "context", "both"]},
          "mode": {"type": "string", "enum": ["stream", "batch"]},
          "utterances": {"type": "integer", "minimum": 1},
          "wer": {
            "type": "object",
            "required": ["substitutions", "deletions", "insertions", "reference_length", "rate"],
            "additionalProperties": false,
            "properties": {
              "substitutions": {"type": "integer", "minimum": 0},
              "deletions": {"type": "integer", "minimum": 0},
              "insertions": {"type": "integer", "minimum": 0},
              "reference_length": {"type": "integer", "minimum": 0},
              "rate": {"type": "number", "minimum": 0}
            }
          },
          "rtf_p50": {"type": "number", "minimum": 0},
          "ep50_s": {"type": "number", "minimum": 0}
        }
      }
    }
  }
})";
  return nlohmann::json::parse(text);
}

ExperimentReport run_experiment(const ExperimentManifest& m) {
  m.validate();
  Corpus corpus = load_corpus(m.corpus);
  const auto& split = corpus.split(m.split);
  std::vector<const Utterance*> utts;
  for (const auto& u : split) {
    if (m.limit > 0 && static_cast<int>(utts.size()) >= m.limit) break;
    utts.push_back(&u);
  }
  if (utts.empty())
    throw DataError("split '" + m.split + "' of '" + m.corpus + "' is empty");

  ExperimentReport rep;
  rep.corpus = m.corpus;
  rep.seed = m.seed;
  rep.utterances = static_cast<int>(utts.size());

  std::vector<std::vector<int>> refs;
  refs.reserve(utts.size());
  for (const auto* u : utts) refs.push_back(u->transcript);

  for (const auto& [scheme, dir] : m.models) {
    AsrModel<float> model = load_full_model(dir);
    if (model.vocab != corpus.vocab.content_size())
      throw DataError("model at '" + dir + "' was trained with " +
                      std::to_string(model.vocab) + " tokens, corpus has " +
                      std::to_string(corpus.vocab.content_size()));
    for (const auto& variant : m.variants) {
      model.prompt.variant = prompt_variant_from_string(variant);
      for (const auto& mode : m.modes) {
        auto results = decode_split(model, utts, mode, m.search, m.threads);
        CellResult cell;
        cell.scheme = scheme;
        cell.variant = variant;
        cell.mode = mode;
        cell.utterances = static_cast<int>(utts.size());
        std::vector<std::vector<int>> hyps;
        std::vector<double> rtf, ep;
        hyps.reserve(results.size());
        for (const auto& r : results) {
          hyps.push_back(r.hypothesis);
          rtf.push_back(r.rtf);
          ep.push_back(r.ep_latency_s);
        }
        cell.wer = error_rate(refs, hyps);
        cell.rtf_p50 = median(rtf);
        cell.ep50_s = median(ep);
        rep.cells.push_back(std::move(cell));
      }
    }
  }
  check_schema(experiment_report_schema(), rep.to_json(), "report");
  return rep;
}

}  // namespace pasr
