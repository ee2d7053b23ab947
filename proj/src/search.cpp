#include "pasr/search.hpp"

#include <algorithm>
#include <chrono>
#include <map>
#include <numeric>

namespace pasr {

namespace {

double wall_seconds() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

// Computes the hypothesis's next-token distribution on a fork, once per
// prompt state; every extension of this prefix reuses the row and the
// forked session until new prompts invalidate the cache.
void ensure_stepped(FusionHypothesis& h, const Decoder<float>& dec,
                    SearchCounters& counters) {
  if (h.stepped) return;
  auto s = std::make_shared<DecoderSession<float>>(h.session->fork());
  const int input = h.labels.empty() ? dec.sos_id() : h.labels.back();
  h.next_row = std::make_shared<const MatF>(s->score_next(input));
  h.stepped = std::move(s);
  ++counters.decoder_steps;
}

std::vector<int> top_content(const MatD& logq, int t, int keep) {
  const int V = static_cast<int>(logq.cols()) - 1;
  std::vector<int> ids(V);
  std::iota(ids.begin(), ids.end(), 0);
  keep = std::min(keep, V);
  std::partial_sort(ids.begin(), ids.begin() + keep, ids.end(),
                    [&](int a, int b) {
                      const double qa = logq(t, ctc::to_grid(a));
                      const double qb = logq(t, ctc::to_grid(b));
                      return qa != qb ? qa > qb : a < b;
                    });
  ids.resize(keep);
  return ids;
}

std::vector<int> beam_lcp(const std::vector<FusionHypothesis>& beam) {
  std::vector<int> p = beam.front().labels;
  for (size_t i = 1; i < beam.size() && !p.empty(); ++i) {
    const auto& l = beam[i].labels;
    size_t n = 0;
    while (n < p.size() && n < l.size() && p[n] == l[n]) ++n;
    p.resize(n);
  }
  return p;
}

double percentile(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  if (v.size() == 1) return v[0];
  const double at = p * (v.size() - 1);
  const size_t lo = static_cast<size_t>(at);
  const size_t hi = std::min(lo + 1, v.size() - 1);
  const double w = at - lo;
  return v[lo] * (1 - w) + v[hi] * w;
}

struct BlockOutcome {
  PromptChunk<float> chunk;
  MatD logq;
};

BlockOutcome process_block(ad::Tape<float>& tape, AsrModel<float>& model,
                           EncoderState<float>& st, int b,
                           const MatF& block_features, int frame_offset) {
  auto h = model.encoder.encode_block(tape, st, b, block_features);
  auto grid = model.posterior_grid(h.value());
  auto greedy = ctc::greedy_decode(grid);
  auto chunk = model.prompt.assemble_chunk(
      tape, b, h, greedy.z, st.ctx[model.cfg.encoder.n_layers], frame_offset);
  return {std::move(chunk), grid.logq.template cast<double>()};
}

void ingest_into_beam(std::vector<FusionHypothesis>& beam,
                      const PromptChunk<float>& chunk,
                      SearchCounters& counters) {
  std::vector<const DecoderSession<float>*> done;
  for (auto& h : beam) {
    auto* s = h.session.get();
    if (std::find(done.begin(), done.end(), s) == done.end()) {
      s->ingest_chunk(chunk);
      counters.prompt_rows += chunk.size();
      done.push_back(s);
    }
    // step-ahead rows predate these prompts; future first scorings must
    // see them
    h.stepped.reset();
    h.next_row.reset();
  }
}

// End-of-sequence completion: the fused score plus the decoder's (and
// optionally the LM's) eos term.
const FusionHypothesis* finalize(std::vector<FusionHypothesis>& beam,
                                 AsrModel<float>& model,
                                 const SearchConfig& cfg,
                                 SearchCounters& counters, double* score_out) {
  const FusionHypothesis* best = nullptr;
  double best_score = neg_inf<double>();
  for (auto& h : beam) {
    ensure_stepped(h, model.decoder, counters);
    double s = fusion_score(h, cfg);
    if (cfg.lambda_dec != 0)
      s += cfg.lambda_dec * (*h.next_row)(0, model.decoder.eos_output());
    if (cfg.lm && cfg.lambda_lm != 0)
      s += cfg.lambda_lm * cfg.lm(h.labels, model.vocab);
    if (!best || s > best_score ||
        (s == best_score && h.labels < best->labels)) {
      best = &h;
      best_score = s;
    }
  }
  *score_out = best_score;
  return best;
}

void fill_final(StreamResult& res, const FusionHypothesis& best) {
  res.hypothesis = best.labels;
  res.final_ledger = best.session->ledger();
  res.final_prompt_positions = best.session->prompt_positions();
  res.final_token_positions = best.session->token_positions();
}

}  // namespace

std::vector<FusionHypothesis> beam_step(std::vector<FusionHypothesis>& beam,
                                        const MatD& logq, int t,
                                        const Decoder<float>& dec,
                                        const SearchConfig& cfg,
                                        SearchCounters& counters) {
  cfg.validate();
  if (beam.empty())
    throw ContractError("beam must hold at least one hypothesis");
  if (t < 0 || t >= logq.rows())
    throw ContractError("frame " + std::to_string(t) + " outside grid of " +
                        std::to_string(logq.rows()));

  struct Cand {
    FusionHypothesis* base = nullptr;    // this prefix is already in the beam
    FusionHypothesis* parent = nullptr;  // source of a fresh extension
    int ext = -1;
  };
  std::map<std::vector<int>, Cand> cands;
  for (auto& h : beam) cands[h.labels].base = &h;
  const auto ext_tokens = top_content(logq, t, cfg.prefilter);
  for (auto& h : beam) {
    for (int c : ext_tokens) {
      auto grown = h.labels;
      grown.push_back(c);
      auto& cd = cands[grown];
      cd.parent = &h;
      cd.ext = c;
    }
  }

  std::vector<FusionHypothesis> out;
  out.reserve(cands.size());
  for (auto& [labels, cd] : cands) {
    FusionHypothesis nh;
    nh.labels = labels;
    if (cd.parent) {
      nh.score = ctc::prefix_score_step(
          cd.parent->score,
          cd.base ? cd.base->score : ctc::PrefixScore<double>::dead(),
          cd.parent->last(), cd.ext, logq, t);
    } else {
      nh.score = ctc::prefix_stay(cd.base->score, cd.base->last(), logq, t);
    }
    if (cd.base) {
      // a known prefix keeps the decoder branch it was born with; a
      // same-frame extension only adds CTC mass
      nh.dec_logp = cd.base->dec_logp;
      nh.lm_logp = cd.base->lm_logp;
      nh.session = cd.base->session;
      nh.j_visible = cd.base->j_visible;
      nh.stepped = cd.base->stepped;
      nh.next_row = cd.base->next_row;
    } else {
      ensure_stepped(*cd.parent, dec, counters);
      nh.session = cd.parent->stepped;
      nh.dec_logp = cd.parent->dec_logp + (*cd.parent->next_row)(0, cd.ext);
      nh.lm_logp = cd.parent->lm_logp +
                   (cfg.lm ? cfg.lm(cd.parent->labels, cd.ext) : 0.0);
      nh.j_visible = cd.parent->j_visible;
      nh.j_visible.push_back(nh.session->prompt_positions());
    }
    out.push_back(std::move(nh));
  }

  std::stable_sort(out.begin(), out.end(),
                   [&](const FusionHypothesis& a, const FusionHypothesis& b) {
                     const double sa = fusion_score(a, cfg);
                     const double sb = fusion_score(b, cfg);
                     return sa != sb ? sa > sb : a.labels < b.labels;
                   });
  if (static_cast<int>(out.size()) > cfg.beam) out.resize(cfg.beam);
  return out;
}

StreamResult stream_decode(AsrModel<float>& model, const MatF& features,
                           const SearchConfig& cfg) {
  cfg.validate();
  const BlockPlan plan = model.plan_for(static_cast<int>(features.rows()));
  ad::Tape<float> tape(false);
  auto st = model.encoder.initial_state(tape);

  StreamResult res;
  const double period = cfg.frame_period_ms / 1000.0;
  res.audio_s = features.rows() * period;

  std::vector<FusionHypothesis> beam(1);
  beam[0].session =
      std::make_shared<DecoderSession<float>>(model.decoder.open_session());

  double done_prev = 0;
  size_t emitted = 0;
  int frame_offset = 0;
  for (int b = 0; b < plan.block_count(); ++b) {
    const auto& blk = plan.blocks[b];
    const double arrive = blk.end * period;
    const double t0 = wall_seconds();

    auto out = process_block(tape, model, st, b,
                             features.middleRows(blk.begin, blk.end - blk.begin),
                             frame_offset);
    frame_offset += blk.sub_len;
    ingest_into_beam(beam, out.chunk, res.counters);
    for (int t = 0; t < out.logq.rows(); ++t)
      beam = beam_step(beam, out.logq, t, model.decoder, cfg, res.counters);

    const bool is_last = b + 1 == plan.block_count();
    const FusionHypothesis* best = nullptr;
    if (is_last)
      best = finalize(beam, model, cfg, res.counters, &res.final_score);

    const double wall =
        (wall_seconds() - t0) + cfg.block_sleep_ms / 1000.0;
    const double done = std::max(arrive, done_prev) + wall;
    done_prev = done;
    res.process_s += wall;

    const std::vector<int> commit = is_last ? best->labels : beam_lcp(beam);
    for (; emitted < commit.size(); ++emitted)
      res.timeline.push_back({commit[emitted], b, done});
    if (is_last) {
      fill_final(res, *best);
      res.ep_latency_s = done - arrive;
    }
  }
  res.rtf = res.audio_s > 0 ? res.process_s / res.audio_s : 0;
  return res;
}

StreamResult batch_decode(AsrModel<float>& model, const MatF& features,
                          const SearchConfig& cfg) {
  cfg.validate();
  const BlockPlan plan = model.plan_for(static_cast<int>(features.rows()));
  ad::Tape<float> tape(false);
  auto st = model.encoder.initial_state(tape);

  StreamResult res;
  const double period = cfg.frame_period_ms / 1000.0;
  res.audio_s = features.rows() * period;
  const double t0 = wall_seconds();

  std::vector<FusionHypothesis> beam(1);
  beam[0].session =
      std::make_shared<DecoderSession<float>>(model.decoder.open_session());

  std::vector<MatD> grids;
  grids.reserve(plan.block_count());
  int frame_offset = 0;
  for (int b = 0; b < plan.block_count(); ++b) {
    const auto& blk = plan.blocks[b];
    auto out = process_block(tape, model, st, b,
                             features.middleRows(blk.begin, blk.end - blk.begin),
                             frame_offset);
    frame_offset += blk.sub_len;
    ingest_into_beam(beam, out.chunk, res.counters);
    grids.push_back(std::move(out.logq));
  }
  for (const auto& g : grids)
    for (int t = 0; t < g.rows(); ++t)
      beam = beam_step(beam, g, t, model.decoder, cfg, res.counters);

  const FusionHypothesis* best =
      finalize(beam, model, cfg, res.counters, &res.final_score);

  const double wall = (wall_seconds() - t0) +
                      plan.block_count() * cfg.block_sleep_ms / 1000.0;
  res.process_s = wall;
  const double done = res.audio_s + wall;  // all audio arrives first
  for (size_t i = 0; i < best->labels.size(); ++i)
    res.timeline.push_back(
        {best->labels[i], plan.block_count() - 1, done});
  fill_final(res, *best);
  res.ep_latency_s = wall;
  res.rtf = res.audio_s > 0 ? res.process_s / res.audio_s : 0;
  return res;
}

LatencyReport measure(AsrModel<float>& model,
                      const std::vector<Utterance>& utts,
                      const SearchConfig& cfg) {
  if (utts.empty()) throw ContractError("latency needs at least one utterance");
  LatencyReport rep;
  rep.utterances = static_cast<int>(utts.size());
  for (const auto& u : utts) {
    auto r = stream_decode(model, u.features, cfg);
    rep.rtf.push_back(r.rtf);
    rep.ep_s.push_back(r.ep_latency_s);
  }
  rep.rtf_p50 = percentile(rep.rtf, 0.5);
  rep.rtf_p90 = percentile(rep.rtf, 0.9);
  rep.ep50_s = percentile(rep.ep_s, 0.5);
  rep.ep90_s = percentile(rep.ep_s, 0.9);
  return rep;
}

}  // namespace pasr
