#pragma once

// Fused frame/label-synchronous beam search over the CTC posterior grid and
// the prompted decoder, plus the streaming block driver that feeds it. Each
// hypothesis advances its CTC prefix mass every frame; the decoder scores a
// token once, when the prefix first gains it, against the prompts ingested
// up to that point, and the cached session is never replayed.

#include "pasr/corpus.hpp"
#include "pasr/ctc.hpp"
#include "pasr/decoder.hpp"
#include "pasr/model.hpp"

#include <functional>
#include <memory>
#include <vector>

namespace pasr {

struct SearchConfig {
  int beam = 8;
  double lambda_ctc = 0.4;
  double lambda_dec = 0.6;
  double lambda_lm = 0.4;      // applied only when an lm callback is set
  double length_penalty = 0.0; // added per emitted token
  int prefilter = 4;           // CTC-ranked extension tokens per frame
  double frame_period_ms = 10.0;
  double block_sleep_ms = 0.0; // simulated extra cost per block

  // Optional shallow-fusion scorer: log p(next | prefix) over content ids,
  // with next == vocab meaning the end-of-sequence event.
  std::function<double(const std::vector<int>&, int)> lm;

  void validate() const {
    if (beam < 1) throw ConfigError("beam width must be at least 1");
    if (prefilter < 1) throw ConfigError("prefilter must keep at least 1 token");
    if (lambda_ctc < 0 || lambda_dec < 0 || lambda_lm < 0)
      throw ConfigError("fusion weights must be non-negative");
    if (frame_period_ms <= 0) throw ConfigError("frame period must be positive");
    if (block_sleep_ms < 0) throw ConfigError("block cost must be non-negative");
  }

  void apply_json(const nlohmann::json& j) {
    for (const auto& [key, value] : j.items()) {
      if (key == "beam") beam = value.get<int>();
      else if (key == "prefilter") prefilter = value.get<int>();
      else if (key == "lambda_ctc") lambda_ctc = value.get<double>();
      else if (key == "lambda_dec") lambda_dec = value.get<double>();
      else if (key == "lambda_lm") lambda_lm = value.get<double>();
      else if (key == "length_penalty") length_penalty = value.get<double>();
      else if (key == "frame_period_ms") frame_period_ms = value.get<double>();
      else if (key == "block_sleep_ms") block_sleep_ms = value.get<double>();
      else throw ConfigError("unknown key search." + key);
    }
    validate();
  }
};

struct FusionHypothesis {
  std::vector<int> labels;
  ctc::PrefixScore<double> score = ctc::PrefixScore<double>::initial();
  double dec_logp = 0;
  double lm_logp = 0;

  // Session state after consuming sos, y_1 .. y_{l-1}; shared between
  // hypotheses that agree on that consumed prefix.
  std::shared_ptr<DecoderSession<float>> session;
  std::vector<int> j_visible;  // prompt positions seen by each scored token

  // One decode step ahead, reused by every extension until new prompts
  // arrive: the session that consumed y_l and the resulting distribution.
  std::shared_ptr<DecoderSession<float>> stepped;
  std::shared_ptr<const MatF> next_row;

  int last() const { return labels.empty() ? -1 : labels.back(); }
};

inline double fusion_score(const FusionHypothesis& h, const SearchConfig& cfg) {
  // zero-weight terms are skipped outright so a dead branch (-inf) under a
  // disabled weight cannot poison the sum with NaN
  double s = cfg.length_penalty * static_cast<double>(h.labels.size());
  if (cfg.lambda_ctc != 0) s += cfg.lambda_ctc * h.score.total();
  if (cfg.lambda_dec != 0) s += cfg.lambda_dec * h.dec_logp;
  if (cfg.lm && cfg.lambda_lm != 0) s += cfg.lambda_lm * h.lm_logp;
  return s;
}

struct SearchCounters {
  long long decoder_steps = 0;  // score_next invocations
  long long prompt_rows = 0;    // prompt rows ingested across live sessions
};

// Advances every hypothesis across frame t of logq (frames x V+1, log
// domain), extends by the prefilter's top content tokens, merges duplicate
// prefixes, and keeps the top beam-width by fused score. Fresh extensions
// fork the parent session and request exactly one decoder step, shared by
// all of the parent's extensions for this prompt state.
std::vector<FusionHypothesis> beam_step(std::vector<FusionHypothesis>& beam,
                                        const MatD& logq, int t,
                                        const Decoder<float>& dec,
                                        const SearchConfig& cfg,
                                        SearchCounters& counters);

struct Emission {
  int token = 0;
  int block = 0;
  double time_s = 0;  // simulated clock at emission
};

struct StreamResult {
  std::vector<int> hypothesis;
  std::vector<Emission> timeline;
  double final_score = 0;
  double audio_s = 0;
  double process_s = 0;
  double rtf = 0;
  double ep_latency_s = 0;
  SearchCounters counters;
  // evidence that the winning session computed each position exactly once
  std::vector<DecoderSession<float>::LedgerEntry> final_ledger;
  int final_prompt_positions = 0;
  int final_token_positions = 0;
};

// Blockwise streaming decode: encode each block as it arrives, build its
// prompt chunk, ingest it into every live session, run the block's frames
// through the beam, and emit the beam's longest common prefix. After the
// last block the end-of-sequence score picks the final hypothesis.
StreamResult stream_decode(AsrModel<float>& model, const MatF& features,
                           const SearchConfig& cfg);

// Ingests every block's prompts up front, then runs the same fused search
// over all frames; the non-streaming reference condition.
StreamResult batch_decode(AsrModel<float>& model, const MatF& features,
                          const SearchConfig& cfg);

struct LatencyReport {
  int utterances = 0;
  double rtf_p50 = 0;
  double rtf_p90 = 0;
  double ep50_s = 0;
  double ep90_s = 0;
  std::vector<double> rtf;   // per utterance, decode order
  std::vector<double> ep_s;
};

LatencyReport measure(AsrModel<float>& model,
                      const std::vector<Utterance>& utts,
                      const SearchConfig& cfg);

}  // namespace pasr
