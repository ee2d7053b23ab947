#pragma once

// Experiment orchestration over trained checkpoints: decodes a corpus split
// under every requested (training scheme x prompt variant x decode mode)
// cell and reports the token error rate, median real-time factor, and
// median endpoint latency per cell, as a table and as JSON. "WER" in the
// reports is token error rate: the synthetic corpus treats each token as
// one word.

#include "pasr/corpus.hpp"
#include "pasr/eval.hpp"
#include "pasr/model.hpp"
#include "pasr/search.hpp"

#include <json.hpp>

#include <map>
#include <string>
#include <vector>

namespace pasr {

struct ExperimentManifest {
  std::string corpus;
  std::map<std::string, std::string> models;  // scheme label -> checkpoint dir
  std::vector<std::string> variants{"both"};
  std::vector<std::string> modes{"stream", "batch"};
  std::string split = "test";
  int limit = 0;  // cap on utterances, 0 keeps the whole split
  int threads = 1;
  unsigned seed = 1;
  SearchConfig search;

  void validate() const;
  static ExperimentManifest from_json(const nlohmann::json& j);
  static ExperimentManifest from_file(const std::string& path);
};

struct CellResult {
  std::string scheme, variant, mode;
  ErrorRateReport wer;
  double rtf_p50 = 0;
  double ep50_s = 0;
  int utterances = 0;
};

struct ExperimentReport {
  std::string corpus;
  unsigned seed = 1;
  int utterances = 0;
  std::vector<CellResult> cells;

  nlohmann::json to_json() const;
  std::string table() const;
};

// canonical schema for ExperimentReport::to_json; the same document is
// published at schemas/experiment_report.schema.json
nlohmann::json experiment_report_schema();

ExperimentReport run_experiment(const ExperimentManifest& m);

// Rebuilds a model from a fine-tune checkpoint: architecture and
// vocabulary come from the stored meta, which must carry the full "all"
// parameter scope.
AsrModel<float> load_full_model(const std::string& dir);

// Decodes utterances under one mode ("stream" or "batch"). Decoding only
// reads the model, so threads > 1 splits the utterances across workers;
// results always come back in input order.
std::vector<StreamResult> decode_split(AsrModel<float>& model,
                                       const std::vector<const Utterance*>& utts,
                                       const std::string& mode,
                                       const SearchConfig& cfg, int threads);

double median(std::vector<double> v);

}  // namespace pasr
