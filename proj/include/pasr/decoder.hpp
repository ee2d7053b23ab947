#pragma once

// Decoder-only transformer over a mixed sequence of prompt positions and
// token positions. Prompts attend only earlier prompts (never tokens), so
// their cached states are independent of the decoding history; tokens attend
// the prompts visible at their step plus the causal token prefix. Prompts
// and tokens carry separate learned position indices plus a two-valued
// segment embedding, so mid-decode prompt arrivals never shift token
// positions.
//
// Token id space: content tokens 0..V-1, sos = V, eos = V+1. Output
// distributions cover V+1 entries: content tokens at their own index and
// eos at index V. The output projection is tied to the embedding rows.

#include "pasr/autodiff.hpp"
#include "pasr/common.hpp"
#include "pasr/prompt.hpp"

#include <memory>
#include <string>
#include <vector>

namespace pasr {

struct DecoderConfig {
  int d_model = 64;
  int n_layers = 2;
  int heads = 4;
  int d_ff = 256;
  int max_prompts = 512;  // prompt positions including the start prompt
  int max_tokens = 128;

  void validate() const {
    if (d_model <= 0 || n_layers <= 0 || d_ff <= 0)
      throw ConfigError("decoder extents must be positive");
    if (heads <= 0 || d_model % heads != 0)
      throw ConfigError("d_model must be divisible by heads");
    if (max_prompts < 1 || max_tokens < 1)
      throw ConfigError("position tables must be non-empty");
  }
};

template <class S>
struct DecoderLayer {
  ad::Parameter<S> ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
  ad::Parameter<S> ln2_g, ln2_b, w1, b1, w2, b2;

  void init(const std::string& prefix, const DecoderConfig& cfg, Rng& rng) {
    const int d = cfg.d_model;
    const double ws = 1.0 / std::sqrt(double(d));
    auto mk = [&](ad::Parameter<S>& p, const char* name, Mat<S> v) {
      p = ad::Parameter<S>(prefix + name, std::move(v));
    };
    mk(ln1_g, ".ln1.g", Mat<S>::Ones(1, d));
    mk(ln1_b, ".ln1.b", Mat<S>::Zero(1, d));
    mk(wq, ".attn.wq", random_normal<S>(d, d, rng, ws));
    mk(bq, ".attn.bq", Mat<S>::Zero(1, d));
    mk(wk, ".attn.wk", random_normal<S>(d, d, rng, ws));
    mk(bk, ".attn.bk", Mat<S>::Zero(1, d));
    mk(wv, ".attn.wv", random_normal<S>(d, d, rng, ws));
    mk(bv, ".attn.bv", Mat<S>::Zero(1, d));
    mk(wo, ".attn.wo", random_normal<S>(d, d, rng, ws));
    mk(bo, ".attn.bo", Mat<S>::Zero(1, d));
    mk(ln2_g, ".ln2.g", Mat<S>::Ones(1, d));
    mk(ln2_b, ".ln2.b", Mat<S>::Zero(1, d));
    mk(w1, ".ff.w1", random_normal<S>(d, cfg.d_ff, rng, ws));
    mk(b1, ".ff.b1", Mat<S>::Zero(1, cfg.d_ff));
    mk(w2, ".ff.w2",
       random_normal<S>(cfg.d_ff, d, rng, 1.0 / std::sqrt(double(cfg.d_ff))));
    mk(b2, ".ff.b2", Mat<S>::Zero(1, d));
  }

  void collect(std::vector<ad::Parameter<S>*>& out) {
    for (auto* p : {&ln1_g, &ln1_b, &wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo,
                    &ln2_g, &ln2_b, &w1, &b1, &w2, &b2})
      out.push_back(p);
  }

  ad::Var<S> apply(ad::Tape<S>& tape, const ad::Var<S>& x, const Mask& mask,
                   int heads) {
    auto h = ad::layer_norm(x, tape.use(ln1_g), tape.use(ln1_b));
    auto attn = ad::masked_attention(ad::linear(h, tape.use(wq), tape.use(bq)),
                                     ad::linear(h, tape.use(wk), tape.use(bk)),
                                     ad::linear(h, tape.use(wv), tape.use(bv)),
                                     mask, heads);
    auto x1 = ad::add(x, ad::linear(attn, tape.use(wo), tape.use(bo)));
    auto h2 = ad::layer_norm(x1, tape.use(ln2_g), tape.use(ln2_b));
    return ad::add(x1, ad::feed_forward(h2, tape.use(w1), tape.use(b1),
                                        tape.use(w2), tape.use(b2)));
  }
};

template <class S>
class DecoderSession;

template <class S>
struct Decoder {
  DecoderConfig cfg;
  int vocab = 0;  // content tokens
  ad::Parameter<S> embed;       // (V+2) x d: content, sos, eos
  ad::Parameter<S> u0;          // start prompt, always prompt position 0
  ad::Parameter<S> pos_prompt;  // max_prompts x d
  ad::Parameter<S> pos_token;   // max_tokens x d
  ad::Parameter<S> seg;         // 2 x d: prompt, token
  std::vector<DecoderLayer<S>> layers;
  ad::Parameter<S> lnf_g, lnf_b;

  int sos_id() const { return vocab; }
  int eos_id() const { return vocab + 1; }
  int n_outputs() const { return vocab + 1; }  // content + eos
  int eos_output() const { return vocab; }

  void init(const DecoderConfig& c, int vocab_size, Rng& rng) {
    c.validate();
    if (vocab_size < 1) throw ConfigError("vocabulary must be non-empty");
    cfg = c;
    vocab = vocab_size;
    const int d = cfg.d_model;
    const double es = 1.0 / std::sqrt(double(d));
    embed = ad::Parameter<S>("dec.embed", random_normal<S>(vocab + 2, d, rng, es));
    u0 = ad::Parameter<S>("dec.u0", random_normal<S>(1, d, rng, es));
    pos_prompt =
        ad::Parameter<S>("dec.pos.prompt", random_normal<S>(cfg.max_prompts, d, rng, es));
    pos_token =
        ad::Parameter<S>("dec.pos.token", random_normal<S>(cfg.max_tokens, d, rng, es));
    seg = ad::Parameter<S>("dec.seg", random_normal<S>(2, d, rng, es));
    layers.resize(cfg.n_layers);
    for (int n = 0; n < cfg.n_layers; ++n)
      layers[n].init("dec.l" + std::to_string(n), cfg, rng);
    lnf_g = ad::Parameter<S>("dec.lnf.g", Mat<S>::Ones(1, d));
    lnf_b = ad::Parameter<S>("dec.lnf.b", Mat<S>::Zero(1, d));
  }

  std::vector<ad::Parameter<S>*> params() {
    std::vector<ad::Parameter<S>*> out = {&embed, &u0, &pos_prompt, &pos_token, &seg};
    for (auto& l : layers) l.collect(out);
    out.push_back(&lnf_g);
    out.push_back(&lnf_b);
    return out;
  }

  // rows used by the tied output projection: content tokens then eos
  ad::Var<S> output_rows(ad::Tape<S>& tape) {
    auto e = tape.use(embed);
    return ad::concat_rows<S>(
        {ad::slice_rows(e, 0, vocab), ad::slice_rows(e, vocab + 1, 1)});
  }

  void check_token(int id) const {
    if (id < 0 || id >= vocab + 2)
      throw TargetError("token id " + std::to_string(id) + " outside 0.." +
                        std::to_string(vocab + 1));
  }

  // Teacher-forced forward. prompts: J x d (excluding the start prompt).
  // token_ids: input tokens y_0..y_{K-1} (y_0 normally sos). target_mask:
  // K x J visibility of each external prompt for each target row; null
  // means fully visible. Returns K x (V+1) next-token log-probabilities.
  ad::Var<S> batch_forward(ad::Tape<S>& tape, const ad::Var<S>& prompts,
                           const std::vector<int>& token_ids,
                           const Mask* target_mask = nullptr) {
    const int J = prompts.rows();
    const int K = static_cast<int>(token_ids.size());
    if (K == 0) throw ContractError("no token positions");
    if (J > 0 && prompts.cols() != cfg.d_model)
      throw ShapeError("prompts " + shape_str(prompts.rows(), prompts.cols()) +
                       ", decoder dimension " + std::to_string(cfg.d_model));
    for (int id : token_ids) check_token(id);
    if (1 + J > cfg.max_prompts)
      throw TargetError("prompt position " + std::to_string(J) +
                        " exceeds table of " + std::to_string(cfg.max_prompts));
    if (K > cfg.max_tokens)
      throw TargetError("token position " + std::to_string(K - 1) +
                        " exceeds table of " + std::to_string(cfg.max_tokens));
    if (target_mask &&
        (target_mask->rows() != K || target_mask->cols() != J))
      throw ContractError("target mask " +
                          shape_str(target_mask->rows(), target_mask->cols()) +
                          ", expected " + shape_str(K, J));

    // rows: [u0, prompts, tokens]
    std::vector<int> pp(J + 1), tp(K);
    for (int j = 0; j <= J; ++j) pp[j] = j;
    for (int i = 0; i < K; ++i) tp[i] = i;
    auto prompt_base = ad::add(
        ad::embedding_lookup(tape.use(pos_prompt), pp),
        ad::embedding_lookup(tape.use(seg), std::vector<int>(J + 1, 0)));
    auto stacked =
        J > 0 ? ad::concat_rows<S>({tape.use(u0), prompts}) : tape.use(u0);
    auto prompt_x = ad::add(stacked, prompt_base);
    auto token_x = ad::add(
        ad::add(ad::embedding_lookup(tape.use(embed), token_ids),
                ad::embedding_lookup(tape.use(pos_token), tp)),
        ad::embedding_lookup(tape.use(seg), std::vector<int>(K, 1)));
    auto x = ad::concat_rows<S>({prompt_x, token_x});

    const int M = 1 + J + K;
    Mask mask = Mask::Constant(M, M, false);
    for (int p = 0; p <= J; ++p)
      for (int q = 0; q <= p; ++q) mask(p, q) = true;
    for (int i = 0; i < K; ++i) {
      const int r = 1 + J + i;
      mask(r, 0) = true;  // start prompt always visible
      for (int j = 0; j < J; ++j)
        mask(r, 1 + j) = target_mask == nullptr || (*target_mask)(i, j);
      for (int q = 0; q <= i; ++q) mask(r, 1 + J + q) = true;
    }

    for (auto& layer : layers) x = layer.apply(tape, x, mask, cfg.heads);
    auto h = ad::layer_norm(ad::slice_rows(x, 1 + J, K), tape.use(lnf_g),
                            tape.use(lnf_b));
    return ad::log_softmax_rows(ad::matmul_nt(h, output_rows(tape)));
  }

  DecoderSession<S> open_session() const;
};

// Incremental decoding state. The per-layer prompt key/value cache is a
// list of immutable segments shared between forks; token key/values are
// private per branch. Prompt states never depend on tokens, so segments
// computed once are valid for every branch and every future step.
template <class S>
class DecoderSession {
 public:
  struct LedgerEntry {
    char kind;      // 'p' or 't'
    int index;      // position within its kind (prompt 0 is the start prompt)
    int j_visible;  // prompt positions visible at ingestion (incl. start)
  };

  explicit DecoderSession(const Decoder<S>* model) : model_(model) {
    tok_k_.assign(model_->cfg.n_layers, Mat<S>(0, model_->cfg.d_model));
    tok_v_.assign(model_->cfg.n_layers, Mat<S>(0, model_->cfg.d_model));
    Mat<S> x = model_->u0.value + model_->pos_prompt.value.row(0) +
               model_->seg.value.row(0);
    append_prompt_rows(x);
    ledger_.push_back({'p', 0, 1});
  }

  int prompt_positions() const { return prompt_positions_; }  // incl. start
  int token_positions() const { return token_positions_; }
  int next_block() const { return next_block_; }
  const std::vector<LedgerEntry>& ledger() const { return ledger_; }

  // Bytes of the first prompt segment; exposes physical sharing to tests.
  const S* prompt_cache_data(int layer) const {
    return prompt_segs_.front()->k[layer].data();
  }

  const Mat<S>& token_cache_k(int layer) const { return tok_k_[layer]; }

  Mat<S> prompt_cache_k(int layer) const {
    Mat<S> out(prompt_positions_, model_->cfg.d_model);
    int at = 0;
    for (const auto& seg : prompt_segs_) {
      out.middleRows(at, seg->k[layer].rows()) = seg->k[layer];
      at += static_cast<int>(seg->k[layer].rows());
    }
    return out;
  }

  void ingest_chunk(const PromptChunk<S>& chunk) {
    if (chunk.block != next_block_)
      throw SequencingError("session expects block " +
                            std::to_string(next_block_) + ", got chunk for " +
                            std::to_string(chunk.block));
    ++next_block_;
    if (chunk.size() == 0) return;
    ingest_prompt_rows(chunk.prompts.value());
  }

  // Appends raw prompt vectors (decoder embedding space, before position
  // and segment terms).
  void ingest_prompt_rows(const Mat<S>& rows) {
    const int m = static_cast<int>(rows.rows());
    if (m == 0) return;
    if (rows.cols() != model_->cfg.d_model)
      throw ShapeError("prompt rows " + shape_str(rows.rows(), rows.cols()) +
                       ", decoder dimension " + std::to_string(model_->cfg.d_model));
    if (prompt_positions_ + m > model_->cfg.max_prompts)
      throw TargetError("prompt position " + std::to_string(prompt_positions_ + m - 1) +
                        " exceeds table of " + std::to_string(model_->cfg.max_prompts));
    Mat<S> x = rows;
    for (int i = 0; i < m; ++i)
      x.row(i) += model_->pos_prompt.value.row(prompt_positions_ + i) +
                  model_->seg.value.row(0);
    const int base = prompt_positions_;
    append_prompt_rows(x);
    for (int i = 0; i < m; ++i) ledger_.push_back({'p', base + i, base + i + 1});
  }

  // One decode step: embeds y_prev, attends every ingested prompt plus the
  // token prefix, returns the 1 x (V+1) next-token log-probabilities.
  Mat<S> score_next(int y_prev) {
    model_->check_token(y_prev);
    if (token_positions_ >= model_->cfg.max_tokens)
      throw TargetError("token position " + std::to_string(token_positions_) +
                        " exceeds table of " + std::to_string(model_->cfg.max_tokens));
    Mat<S> x = model_->embed.value.row(y_prev) +
               model_->pos_token.value.row(token_positions_) +
               model_->seg.value.row(1);
    for (int l = 0; l < model_->cfg.n_layers; ++l) {
      const auto& L = model_->layers[l];
      Mat<S> h = row_norm(x, L.ln1_g.value, L.ln1_b.value);
      Mat<S> q = h * L.wq.value + L.bq.value;
      Mat<S> k_new = h * L.wk.value + L.bk.value;
      Mat<S> v_new = h * L.wv.value + L.bv.value;

      Mat<S> K(prompt_positions_ + token_positions_ + 1, model_->cfg.d_model);
      Mat<S> V(K.rows(), model_->cfg.d_model);
      int at = 0;
      for (const auto& seg : prompt_segs_) {
        K.middleRows(at, seg->k[l].rows()) = seg->k[l];
        V.middleRows(at, seg->v[l].rows()) = seg->v[l];
        at += static_cast<int>(seg->k[l].rows());
      }
      K.middleRows(at, token_positions_) = tok_k_[l];
      V.middleRows(at, token_positions_) = tok_v_[l];
      K.row(at + token_positions_) = k_new;
      V.row(at + token_positions_) = v_new;

      x += attend_one(q, K, V) * L.wo.value + L.bo.value;
      Mat<S> h2 = row_norm(x, L.ln2_g.value, L.ln2_b.value);
      Mat<S> f = (h2 * L.w1.value + L.b1.value).cwiseMax(S(0));
      x += f * L.w2.value + L.b2.value;

      tok_k_[l].conservativeResize(token_positions_ + 1, Eigen::NoChange);
      tok_v_[l].conservativeResize(token_positions_ + 1, Eigen::NoChange);
      tok_k_[l].row(token_positions_) = k_new;
      tok_v_[l].row(token_positions_) = v_new;
    }
    ledger_.push_back({'t', token_positions_, prompt_positions_});
    ++token_positions_;

    Mat<S> h = row_norm(x, model_->lnf_g.value, model_->lnf_b.value);
    Mat<S> logits(1, model_->n_outputs());
    logits.leftCols(model_->vocab) =
        h * model_->embed.value.topRows(model_->vocab).transpose();
    logits(0, model_->vocab) =
        (h * model_->embed.value.row(model_->eos_id()).transpose())(0, 0);
    log_softmax_row<S>(logits.row(0));
    return logits;
  }

  // Copy-on-write clone: prompt segments shared, token cache duplicated.
  DecoderSession fork() const { return DecoderSession(*this); }

 private:
  struct Seg {
    std::vector<Mat<S>> k, v;  // per layer
  };

  static Mat<S> row_norm(const Mat<S>& x, const Mat<S>& g, const Mat<S>& b,
                         S eps = S(1e-5)) {
    Mat<S> out(x.rows(), x.cols());
    for (int i = 0; i < x.rows(); ++i) {
      S mu = x.row(i).mean();
      Mat<S> cent = (x.row(i).array() - mu).matrix();
      S is = S(1) / std::sqrt(cent.array().square().mean() + eps);
      out.row(i) = ((cent * is).cwiseProduct(g.row(0))) + b.row(0);
    }
    return out;
  }

  // single-query multi-head attention over the full key/value matrices
  Mat<S> attend_one(const Mat<S>& q, const Mat<S>& K, const Mat<S>& V) const {
    const int heads = model_->cfg.heads;
    const int dh = model_->cfg.d_model / heads;
    const S inv_sqrt = S(1) / std::sqrt(S(dh));
    Mat<S> out(1, model_->cfg.d_model);
    for (int hd = 0; hd < heads; ++hd) {
      Mat<S> scores =
          (q.middleCols(hd * dh, dh) * K.middleCols(hd * dh, dh).transpose()) *
          inv_sqrt;
      log_softmax_row<S>(scores.row(0));
      Mat<S> w = scores.array().exp().matrix();
      out.middleCols(hd * dh, dh) = w * V.middleCols(hd * dh, dh);
    }
    return out;
  }

  // Runs new prompt rows through the stack attending cached prompts plus a
  // causal within-segment prefix, then appends the new per-layer K/V.
  void append_prompt_rows(Mat<S> x) {
    const int m = static_cast<int>(x.rows());
    auto seg = std::make_shared<Seg>();
    seg->k.reserve(model_->cfg.n_layers);
    seg->v.reserve(model_->cfg.n_layers);
    for (int l = 0; l < model_->cfg.n_layers; ++l) {
      const auto& L = model_->layers[l];
      Mat<S> h = row_norm(x, L.ln1_g.value, L.ln1_b.value);
      Mat<S> q = h * L.wq.value;
      q.rowwise() += L.bq.value.row(0);
      Mat<S> k_new = h * L.wk.value;
      k_new.rowwise() += L.bk.value.row(0);
      Mat<S> v_new = h * L.wv.value;
      v_new.rowwise() += L.bv.value.row(0);

      int cached = 0;
      for (const auto& s : prompt_segs_) cached += static_cast<int>(s->k[l].rows());
      Mat<S> K(cached + m, model_->cfg.d_model), V(cached + m, model_->cfg.d_model);
      int at = 0;
      for (const auto& s : prompt_segs_) {
        K.middleRows(at, s->k[l].rows()) = s->k[l];
        V.middleRows(at, s->v[l].rows()) = s->v[l];
        at += static_cast<int>(s->k[l].rows());
      }
      K.middleRows(cached, m) = k_new;
      V.middleRows(cached, m) = v_new;

      const int heads = model_->cfg.heads;
      const int dh = model_->cfg.d_model / heads;
      const S inv_sqrt = S(1) / std::sqrt(S(dh));
      Mat<S> attn(m, model_->cfg.d_model);
      for (int hd = 0; hd < heads; ++hd) {
        Mat<S> scores = (q.middleCols(hd * dh, dh) *
                         K.middleCols(hd * dh, dh).transpose()) *
                        inv_sqrt;
        for (int i = 0; i < m; ++i) {
          // row i sees cached prompts and within-segment rows <= i
          const int limit = cached + i + 1;
          auto row = scores.row(i).leftCols(limit);
          S mx = row.maxCoeff();
          Mat<S> w = (row.array() - mx).exp().matrix();
          w /= w.sum();
          attn.row(i).segment(hd * dh, dh) =
              w * V.topRows(limit).middleCols(hd * dh, dh);
        }
      }
      x += attn * L.wo.value;
      x.rowwise() += L.bo.value.row(0);
      Mat<S> h2 = row_norm(x, L.ln2_g.value, L.ln2_b.value);
      Mat<S> f = (h2 * L.w1.value).rowwise() + L.b1.value.row(0);
      f = f.cwiseMax(S(0));
      x += f * L.w2.value;
      x.rowwise() += L.b2.value.row(0);

      seg->k.push_back(std::move(k_new));
      seg->v.push_back(std::move(v_new));
    }
    prompt_segs_.push_back(std::move(seg));
    prompt_positions_ += m;
  }

  const Decoder<S>* model_;
  std::vector<std::shared_ptr<const Seg>> prompt_segs_;
  std::vector<Mat<S>> tok_k_, tok_v_;
  std::vector<LedgerEntry> ledger_;
  int prompt_positions_ = 0;
  int token_positions_ = 0;
  int next_block_ = 0;
};

template <class S>
DecoderSession<S> Decoder<S>::open_session() const {
  return DecoderSession<S>(this);
}

}  // namespace pasr
