#include "pasr/train.hpp"

#include <numeric>

namespace pasr {

namespace {

ad::Var<float> lm_sample_loss(ad::Tape<float>& tape, AsrModel<float>& model,
                              const std::vector<int>& sent) {
  std::vector<int> inputs(1, model.decoder.sos_id());
  inputs.insert(inputs.end(), sent.begin(), sent.end());
  auto none = tape.constant(MatF(0, model.cfg.decoder.d_model));
  auto logp = model.decoder.batch_forward(tape, none, inputs, nullptr);
  const int targets = static_cast<int>(sent.size()) + 1;
  MatF pick = MatF::Zero(targets, model.decoder.n_outputs());
  for (size_t i = 0; i < sent.size(); ++i) pick(static_cast<int>(i), sent[i]) = 1.0f;
  pick(targets - 1, model.decoder.eos_output()) = 1.0f;
  return ad::scale(ad::sum_all(ad::hadamard(logp, tape.constant(pick))),
                   static_cast<float>(-1.0 / targets));
}

void check_finite(double loss, int step, const char* stage) {
  if (!std::isfinite(loss))
    throw Error(std::string(stage) + " diverged at step " +
                std::to_string(step) + ": loss=" + std::to_string(loss));
}

}  // namespace

std::vector<int> greedy_transcribe(AsrModel<float>& model, const MatF& features) {
  ad::Tape<float> tape(false);
  const BlockPlan plan = model.plan_for(static_cast<int>(features.rows()));
  auto enc = model.encoder.encode_utterance(tape, features, plan);
  return ctc::greedy_decode(model.posterior_grid(enc.h.value())).y;
}

ErrorRateReport greedy_error_rate(AsrModel<float>& model,
                                  const std::vector<Utterance>& utts) {
  ErrorRateReport total;
  for (const auto& u : utts)
    total += align_counts(u.transcript, greedy_transcribe(model, u.features));
  return total;
}

double lm_dev_nll(AsrModel<float>& model,
                  const std::vector<std::vector<int>>& sentences) {
  double nll = 0;
  long long slots = 0;
  for (const auto& sent : sentences) {
    ad::Tape<float> tape(false);
    const int targets = static_cast<int>(sent.size()) + 1;
    nll += lm_sample_loss(tape, model, sent).value()(0, 0) * targets;
    slots += targets;
  }
  return slots == 0 ? 0.0 : nll / static_cast<double>(slots);
}

TrainReport pretrain_encoder(AsrModel<float>& model, const Corpus& corpus,
                             const TrainConfig& cfg, MetricsLog log) {
  cfg.validate();
  if (corpus.train.empty()) throw DataError("training split is empty");
  Adam<float> opt(model.encoder_params());
  Rng rng(cfg.seed);
  TrainReport rep;
  std::vector<size_t> order(corpus.train.size());
  std::iota(order.begin(), order.end(), size_t{0});

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0;
    long long counted = 0;
    int skipped = 0;
    for (size_t at = 0; at < order.size(); at += cfg.batch_size) {
      const int n = static_cast<int>(
          std::min<size_t>(cfg.batch_size, order.size() - at));
      double batch_loss = 0;
      int used = 0;
      for (int k = 0; k < n; ++k) {
        const Utterance& u = corpus.train[order[at + k]];
        ad::Tape<float> tape;
        try {
          const BlockPlan plan =
              model.plan_for(static_cast<int>(u.features.rows()));
          auto enc = model.encoder.encode_utterance(tape, u.features, plan);
          auto nll = ctc::loss(tape, model.ctc_logits(tape, enc.h), u.transcript);
          tape.backward(ad::scale(nll, 1.0f / n));
          batch_loss += nll.value()(0, 0);
          ++used;
        } catch (const InfeasibleAlignmentError&) {
          ++skipped;
        }
      }
      if (used == 0) {
        opt.zero_grad();
        continue;
      }
      ++rep.steps;
      check_finite(batch_loss / used, rep.steps, "encoder pretraining");
      opt.clip_global_norm(cfg.grad_clip);
      const double lr = scheduled_lr(cfg, rep.steps);
      opt.step(lr);
      opt.zero_grad();
      epoch_loss += batch_loss;
      counted += used;
      log.append({{"stage", "pretrain-encoder"},
                  {"step", rep.steps},
                  {"loss", batch_loss / used},
                  {"lr", lr},
                  {"skipped", skipped}});
    }
    const double dev = greedy_error_rate(model, corpus.dev).rate();
    EpochStats st{epoch, counted ? epoch_loss / counted : 0.0, dev, skipped};
    rep.epochs.push_back(st);
    rep.skipped_total += skipped;
    log.append({{"stage", "pretrain-encoder"},
                {"epoch", epoch},
                {"train_loss", st.train_loss},
                {"dev_token_error", dev}});
  }
  rep.final_train_loss = rep.epochs.back().train_loss;
  rep.final_dev_metric = rep.epochs.back().dev_metric;
  return rep;
}

TrainReport pretrain_lm(AsrModel<float>& model, const TextCorpus& text,
                        const TrainConfig& cfg, MetricsLog log) {
  cfg.validate();
  if (text.train.empty()) throw DataError("LM training split is empty");
  Adam<float> opt(model.decoder_params());
  Rng rng(cfg.seed);
  TrainReport rep;
  std::vector<size_t> order(text.train.size());
  std::iota(order.begin(), order.end(), size_t{0});

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0;
    long long counted = 0;
    for (size_t at = 0; at < order.size(); at += cfg.batch_size) {
      const int n = static_cast<int>(
          std::min<size_t>(cfg.batch_size, order.size() - at));
      double batch_loss = 0;
      for (int k = 0; k < n; ++k) {
        ad::Tape<float> tape;
        auto nll = lm_sample_loss(tape, model, text.train[order[at + k]]);
        tape.backward(ad::scale(nll, 1.0f / n));
        batch_loss += nll.value()(0, 0);
      }
      ++rep.steps;
      check_finite(batch_loss / n, rep.steps, "LM pretraining");
      opt.clip_global_norm(cfg.grad_clip);
      const double lr = scheduled_lr(cfg, rep.steps);
      opt.step(lr);
      opt.zero_grad();
      epoch_loss += batch_loss;
      counted += n;
      log.append({{"stage", "pretrain-lm"},
                  {"step", rep.steps},
                  {"loss", batch_loss / n},
                  {"lr", lr},
                  {"skipped", 0}});
    }
    const double dev = lm_dev_nll(model, text.dev);
    EpochStats st{epoch, counted ? epoch_loss / counted : 0.0, dev, 0};
    rep.epochs.push_back(st);
    log.append({{"stage", "pretrain-lm"},
                {"epoch", epoch},
                {"train_loss", st.train_loss},
                {"dev_nll", dev},
                {"dev_ppl", std::exp(dev)}});
  }
  rep.final_train_loss = rep.epochs.back().train_loss;
  rep.final_dev_metric = rep.epochs.back().dev_metric;
  return rep;
}

TrainReport finetune(AsrModel<float>& model, const Corpus& corpus,
                     const TrainConfig& cfg, MetricsLog log) {
  cfg.validate();
  if (corpus.train.empty()) throw DataError("training split is empty");
  Adam<float> opt(model.params());
  Rng rng(cfg.seed);
  TrainReport rep;
  std::vector<size_t> order(corpus.train.size());
  std::iota(order.begin(), order.end(), size_t{0});

  TrainConfig dev_cfg = cfg;
  dev_cfg.scheme = TrainScheme::kFull;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0;
    long long counted = 0;
    int skipped = 0;
    for (size_t at = 0; at < order.size(); at += cfg.batch_size) {
      const int n = static_cast<int>(
          std::min<size_t>(cfg.batch_size, order.size() - at));
      double batch_loss = 0;
      int used = 0;
      for (int k = 0; k < n; ++k) {
        const Utterance& u = corpus.train[order[at + k]];
        ad::Tape<float> tape;
        try {
          auto sample =
              finetune_sample(tape, model, u.features, u.transcript, cfg, rng);
          if (sample.skipped) {
            ++skipped;
            continue;
          }
          tape.backward(ad::scale(sample.loss, 1.0f / n));
          batch_loss += sample.loss.value()(0, 0);
          ++used;
        } catch (const InfeasibleAlignmentError&) {
          ++skipped;
        }
      }
      if (used == 0) {
        opt.zero_grad();
        continue;
      }
      ++rep.steps;
      check_finite(batch_loss / used, rep.steps, "fine-tuning");
      opt.clip_global_norm(cfg.grad_clip);
      const double lr = scheduled_lr(cfg, rep.steps);
      opt.step(lr);
      opt.zero_grad();
      epoch_loss += batch_loss;
      counted += used;
      log.append({{"stage", "finetune"},
                  {"step", rep.steps},
                  {"loss", batch_loss / used},
                  {"lr", lr},
                  {"skipped", skipped}});
    }

    double dev = 0;
    if (!corpus.dev.empty()) {
      Rng dev_rng(1);
      long long dev_used = 0;
      for (const auto& u : corpus.dev) {
        ad::Tape<float> tape(false);
        try {
          dev += finetune_sample(tape, model, u.features, u.transcript, dev_cfg,
                                 dev_rng)
                     .loss.value()(0, 0);
          ++dev_used;
        } catch (const InfeasibleAlignmentError&) {
        }
      }
      if (dev_used > 0) dev /= static_cast<double>(dev_used);
    }
    EpochStats st{epoch, counted ? epoch_loss / counted : 0.0, dev, skipped};
    rep.epochs.push_back(st);
    rep.skipped_total += skipped;
    log.append({{"stage", "finetune"},
                {"epoch", epoch},
                {"train_loss", st.train_loss},
                {"dev_loss", dev},
                {"skipped", skipped}});
  }
  rep.final_train_loss = rep.epochs.back().train_loss;
  rep.final_dev_metric = rep.epochs.back().dev_metric;
  return rep;
}

}  // namespace pasr
