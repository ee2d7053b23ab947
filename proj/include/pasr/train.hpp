#pragma once

// Three-stage training: CTC pretraining of the blockwise encoder, next-token
// pretraining of the decoder as a plain LM, and joint fine-tuning in which
// prompts are rebuilt from the current parameters every step and masked per
// the configured scheme (full, forced-align, or random-prefix visibility).

#include "pasr/corpus.hpp"
#include "pasr/eval.hpp"
#include "pasr/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

namespace pasr {

enum class TrainScheme { kFull, kForcedAlign, kPrefix };

inline TrainScheme train_scheme_from_string(const std::string& s) {
  if (s == "full") return TrainScheme::kFull;
  if (s == "forced-align" || s == "forced_align") return TrainScheme::kForcedAlign;
  if (s == "prefix") return TrainScheme::kPrefix;
  throw ConfigError("unknown masking scheme '" + s + "'");
}

inline std::string to_string(TrainScheme s) {
  switch (s) {
    case TrainScheme::kFull: return "full";
    case TrainScheme::kForcedAlign: return "forced-align";
    case TrainScheme::kPrefix: return "prefix";
  }
  return "?";
}

struct TrainConfig {
  double lr = 0.0025;  // peak rate under warmup, constant rate without
  int warmup = 200;    // warmup steps; 0 disables the schedule
  int batch_size = 8;
  int epochs = 10;
  TrainScheme scheme = TrainScheme::kPrefix;
  PromptVariant variant = PromptVariant::kBoth;
  double ctc_weight = 0.3;  // auxiliary CTC term during fine-tuning
  double grad_clip = 5.0;
  unsigned seed = 1;

  void validate() const {
    if (lr <= 0) throw ConfigError("learning rate must be positive");
    if (warmup < 0) throw ConfigError("warmup must be non-negative");
    if (batch_size < 1) throw ConfigError("batch size must be positive");
    if (epochs < 1) throw ConfigError("epochs must be positive");
    if (ctc_weight < 0) throw ConfigError("ctc weight must be non-negative");
    if (grad_clip < 0) throw ConfigError("gradient clip must be non-negative");
  }

  void apply_json(const nlohmann::json& j) {
    for (auto& [key, value] : j.items()) {
      if (key == "lr") lr = value.get<double>();
      else if (key == "warmup") warmup = value.get<int>();
      else if (key == "batch_size") batch_size = value.get<int>();
      else if (key == "epochs") epochs = value.get<int>();
      else if (key == "scheme") scheme = train_scheme_from_string(value.get<std::string>());
      else if (key == "variant") variant = prompt_variant_from_string(value.get<std::string>());
      else if (key == "ctc_weight") ctc_weight = value.get<double>();
      else if (key == "grad_clip") grad_clip = value.get<double>();
      else if (key == "seed") seed = value.get<unsigned>();
      else throw ConfigError("unknown key train." + key);
    }
    validate();
  }
};

// Warmup to the peak rate, then inverse square-root decay.
inline double scheduled_lr(const TrainConfig& cfg, int step) {
  if (cfg.warmup <= 0) return cfg.lr;
  const double s = std::max(1, step);
  const double w = cfg.warmup;
  return cfg.lr * std::min(s / w, std::sqrt(w / s));
}

template <class S>
class Adam {
 public:
  explicit Adam(std::vector<ad::Parameter<S>*> params, double beta1 = 0.9,
                double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (auto* p : params_) {
      m_.push_back(Mat<S>::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Mat<S>::Zero(p->value.rows(), p->value.cols()));
    }
  }

  // Scales all gradients so their global norm is at most max_norm; returns
  // the norm before clipping.
  double clip_global_norm(double max_norm) {
    double sq = 0;
    for (auto* p : params_) sq += static_cast<double>(p->grad.squaredNorm());
    const double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
      const S f = static_cast<S>(max_norm / norm);
      for (auto* p : params_) p->grad *= f;
    }
    return norm;
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (size_t i = 0; i < params_.size(); ++i) {
      auto* p = params_[i];
      m_[i] = static_cast<S>(beta1_) * m_[i] + static_cast<S>(1 - beta1_) * p->grad;
      v_[i] = (static_cast<S>(beta2_) * v_[i].array() +
               static_cast<S>(1 - beta2_) * p->grad.array().square())
                  .matrix();
      const auto mhat = m_[i].array() / static_cast<S>(bc1);
      const auto vhat = v_[i].array() / static_cast<S>(bc2);
      p->value.array() -=
          static_cast<S>(lr) * mhat / (vhat.sqrt() + static_cast<S>(eps_));
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  const std::vector<ad::Parameter<S>*>& params() const { return params_; }

 private:
  std::vector<ad::Parameter<S>*> params_;
  std::vector<Mat<S>> m_, v_;
  double beta1_, beta2_, eps_;
  long long t_ = 0;
};

// Append-only JSON-lines log; a default-constructed instance discards.
class MetricsLog {
 public:
  MetricsLog() = default;
  explicit MetricsLog(const std::string& path) {
    if (path.empty()) return;
    out_ = std::make_shared<std::ofstream>(path, std::ios::app);
    if (!*out_) throw DataError("cannot open metrics log " + path);
  }
  void append(const nlohmann::json& j) {
    if (!out_) return;
    *out_ << j.dump() << "\n";
    out_->flush();
  }
  bool enabled() const { return out_ != nullptr; }

 private:
  std::shared_ptr<std::ofstream> out_;
};

inline Mask full_visibility(int targets, int prompts) {
  return Mask::Constant(targets, prompts, true);
}

// Every target sees exactly the prompts of the first beta blocks.
inline Mask prefix_visibility(const std::vector<int>& chunk_sizes, int beta,
                              int targets) {
  if (beta < 1 || beta > static_cast<int>(chunk_sizes.size()))
    throw ContractError("prefix length " + std::to_string(beta) + " outside 1.." +
                        std::to_string(chunk_sizes.size()));
  int total = 0, visible = 0;
  for (size_t b = 0; b < chunk_sizes.size(); ++b) {
    total += chunk_sizes[b];
    if (static_cast<int>(b) < beta) visible += chunk_sizes[b];
  }
  Mask m = Mask::Constant(targets, total, false);
  m.leftCols(visible).setConstant(true);
  return m;
}

inline Mask sample_prefix_mask(const std::vector<int>& chunk_sizes, int targets,
                               Rng& rng, int* beta_out = nullptr) {
  if (chunk_sizes.empty()) throw ContractError("no blocks to sample from");
  std::uniform_int_distribution<int> pick(1, static_cast<int>(chunk_sizes.size()));
  const int beta = pick(rng);
  if (beta_out) *beta_out = beta;
  return prefix_visibility(chunk_sizes, beta, targets);
}

// Alignment-derived visibility. A target sees a CTC prompt when the
// prompt's source frame is no later than the frame where the target's
// token run ends; it sees a block's context prompt when that block starts
// no later than one frame past the token's end. The trailing eos target
// sees every prompt.
template <class S>
Mask forced_align_visibility(
    const std::vector<typename PromptStream<S>::Origin>& origins,
    const std::vector<int>& block_start, const std::vector<int>& end_frame,
    int targets) {
  if (targets != static_cast<int>(end_frame.size()) + 1)
    throw ContractError("expected " + std::to_string(end_frame.size() + 1) +
                        " targets, got " + std::to_string(targets));
  const int J = static_cast<int>(origins.size());
  Mask m = Mask::Constant(targets, J, true);
  for (int i = 0; i + 1 < targets; ++i) {
    const int end = end_frame[i];
    for (int j = 0; j < J; ++j) {
      const auto& org = origins[j];
      m(i, j) = org.is_context ? end >= block_start[org.block] - 1
                               : org.frame <= end;
    }
  }
  return m;
}

template <class S>
struct SampleLoss {
  ad::Var<S> loss;        // token NLL plus the weighted CTC term
  ad::Var<S> token_logp;  // (|Y|+1) x (V+1) per-target log-probabilities
  Mask mask;
  int beta = 0;          // sampled prefix length when scheme = prefix
  int prompt_count = 0;  // flattened prompt positions
  int ctc_prompts = 0;   // kept-frame prompts among them
  bool skipped = false;  // forced alignment infeasible

  // provenance for mask auditing
  std::vector<typename PromptStream<S>::Origin> origins;
  std::vector<int> block_start;  // first subsampled frame per block
  std::vector<int> align_end;    // per-token end frame when forced-aligned
};

// Builds the fine-tuning loss for one utterance on the given tape: encode
// blockwise, project CTC posteriors, greedy-filter prompts, assemble the
// visibility mask, and score the teacher-forced targets. force_beta pins
// the prefix length for tests; 0 samples it.
template <class S>
SampleLoss<S> finetune_sample(ad::Tape<S>& tape, AsrModel<S>& model,
                              const Mat<S>& features, const std::vector<int>& y,
                              const TrainConfig& cfg, Rng& rng,
                              int force_beta = 0) {
  SampleLoss<S> out;
  model.prompt.variant = cfg.variant;
  const BlockPlan plan = model.plan_for(static_cast<int>(features.rows()));
  auto enc = model.encoder.encode_utterance(tape, features, plan);
  auto logits = model.ctc_logits(tape, enc.h);
  auto grid = ctc::PosteriorGrid<S>::from_logits(logits.value());
  auto greedy = ctc::greedy_decode(grid);

  PromptStream<S> stream;
  std::vector<int> block_start(plan.block_count());
  int off = 0;
  for (int b = 0; b < plan.block_count(); ++b) {
    const int len = plan.blocks[b].sub_len;
    block_start[b] = off;
    auto h_block = ad::slice_rows(enc.h, off, len);
    std::vector<int> z(greedy.z.begin() + off, greedy.z.begin() + off + len);
    stream.append(
        model.prompt.assemble_chunk(tape, b, h_block, z, enc.top_ctx[b], off));
    off += len;
  }
  auto prompts = stream.flat(tape, model.cfg.decoder.d_model);
  out.prompt_count = stream.total;
  for (const auto& c : stream.chunks) out.ctc_prompts += c.ctc_count();
  out.origins = stream.origins();
  out.block_start = block_start;

  const int targets = static_cast<int>(y.size()) + 1;
  switch (cfg.scheme) {
    case TrainScheme::kFull:
      out.mask = full_visibility(targets, stream.total);
      break;
    case TrainScheme::kPrefix:
      if (force_beta > 0) {
        out.beta = force_beta;
        out.mask = prefix_visibility(stream.chunk_sizes(), force_beta, targets);
      } else {
        out.mask = sample_prefix_mask(stream.chunk_sizes(), targets, rng, &out.beta);
      }
      break;
    case TrainScheme::kForcedAlign: {
      ctc::ForcedAlignment<S> fa;
      try {
        fa = ctc::forced_align(grid, y);
      } catch (const InfeasibleAlignmentError&) {
        out.skipped = true;
        return out;
      }
      out.align_end = fa.end_frame;
      out.mask = forced_align_visibility<S>(out.origins, block_start,
                                            fa.end_frame, targets);
      break;
    }
  }

  std::vector<int> inputs(1, model.decoder.sos_id());
  inputs.insert(inputs.end(), y.begin(), y.end());
  auto logp = model.decoder.batch_forward(tape, prompts, inputs, &out.mask);
  out.token_logp = logp;

  Mat<S> pick = Mat<S>::Zero(targets, model.decoder.n_outputs());
  for (size_t i = 0; i < y.size(); ++i) pick(static_cast<int>(i), y[i]) = S(1);
  pick(targets - 1, model.decoder.eos_output()) = S(1);
  out.loss = ad::scale(ad::sum_all(ad::hadamard(logp, tape.constant(pick))),
                       S(-1.0 / targets));
  if (cfg.ctc_weight > 0)
    out.loss = ad::add(
        out.loss, ad::scale(ctc::loss(tape, logits, y), S(cfg.ctc_weight)));
  return out;
}

struct EpochStats {
  int epoch = 0;
  double train_loss = 0;  // mean over the epoch's samples
  double dev_metric = 0;  // stage-specific: error rate, NLL, or loss
  int skipped = 0;
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  int steps = 0;
  int skipped_total = 0;
  double final_train_loss = 0;
  double final_dev_metric = 0;
};

// Stage drivers (float models). Each logs {step, loss, lr, skipped} lines
// plus an epoch summary when a log is supplied, and throws if the loss
// stops being finite.
TrainReport pretrain_encoder(AsrModel<float>& model, const Corpus& corpus,
                             const TrainConfig& cfg, MetricsLog log = {});
TrainReport pretrain_lm(AsrModel<float>& model, const TextCorpus& text,
                        const TrainConfig& cfg, MetricsLog log = {});
TrainReport finetune(AsrModel<float>& model, const Corpus& corpus,
                     const TrainConfig& cfg, MetricsLog log = {});

// Greedy CTC transcription (content ids) of one utterance.
std::vector<int> greedy_transcribe(AsrModel<float>& model, const MatF& features);

// Corpus-level greedy token error rate against references.
ErrorRateReport greedy_error_rate(AsrModel<float>& model,
                                  const std::vector<Utterance>& utts);

// Teacher-forced mean NLL per predicted slot of the plain LM.
double lm_dev_nll(AsrModel<float>& model,
                  const std::vector<std::vector<int>>& sentences);

}  // namespace pasr
