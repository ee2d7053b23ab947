#pragma once

// Blockwise acoustic encoder. Each block is subsampled 4x (frame stacking +
// linear map), then N layers of pre-norm attention / causal depthwise conv /
// feed-forward run over the block's positions plus one trailing context
// position inherited from the previous block. The trailing output of layer n
// becomes the context consumed by layer n+1 on the next block, so information
// flows strictly forward in time.

#include "pasr/autodiff.hpp"
#include "pasr/common.hpp"

#include <string>
#include <vector>

namespace pasr {

inline constexpr int kSubsampleFactor = 4;

struct BlockPlan {
  struct Block {
    int begin = 0, end = 0;  // input frame range [begin, end)
    int sub_len = 0;         // subsampled frames
  };
  std::vector<Block> blocks;
  int input_frames = 0;
  int total_sub = 0;

  int block_count() const { return static_cast<int>(blocks.size()); }

  static BlockPlan make(int frames, int block_len_sub) {
    if (frames <= 0) throw ContractError("cannot plan an empty utterance");
    if (block_len_sub <= 0) throw ConfigError("block length must be positive");
    BlockPlan p;
    p.input_frames = frames;
    const int block_input = block_len_sub * kSubsampleFactor;
    for (int begin = 0; begin < frames; begin += block_input) {
      Block b;
      b.begin = begin;
      b.end = std::min(frames, begin + block_input);
      b.sub_len = (b.end - b.begin + kSubsampleFactor - 1) / kSubsampleFactor;
      p.total_sub += b.sub_len;
      p.blocks.push_back(b);
    }
    p.validate();
    return p;
  }

  void validate() const {
    if (blocks.empty()) throw ContractError("plan has no blocks");
    int prev_end = 0;
    for (const auto& b : blocks) {
      if (b.begin != prev_end || b.end <= b.begin)
        throw ContractError("block boundaries must partition the utterance");
      if (b.sub_len > b.end - b.begin || b.sub_len <= 0)
        throw ContractError("subsampled length exceeds block length");
      prev_end = b.end;
    }
    if (prev_end != input_frames)
      throw ContractError("plan covers " + std::to_string(prev_end) + " of " +
                          std::to_string(input_frames) + " frames");
  }
};

struct EncoderConfig {
  int input_dim = 16;
  int d_model = 64;
  int n_layers = 2;
  int heads = 4;
  int d_ff = 256;
  int block_len = 8;  // subsampled frames per block
  int conv_kernel = 3;

  void validate() const {
    if (input_dim <= 0 || d_model <= 0 || n_layers <= 0 || d_ff <= 0)
      throw ConfigError("encoder extents must be positive");
    if (heads <= 0 || d_model % heads != 0)
      throw ConfigError("d_model must be divisible by heads");
    if (block_len <= 0) throw ConfigError("block_len must be positive");
    if (conv_kernel <= 0) throw ConfigError("conv_kernel must be positive");
  }
};

template <class S>
struct EncoderLayer {
  ad::Parameter<S> ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
  ad::Parameter<S> ln2_g, ln2_b, conv_k;
  ad::Parameter<S> ln3_g, ln3_b, w1, b1, w2, b2;

  void init(const std::string& prefix, const EncoderConfig& cfg, Rng& rng) {
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
    mk(conv_k, ".conv.k", random_normal<S>(cfg.conv_kernel, d, rng, 0.3));
    mk(ln3_g, ".ln3.g", Mat<S>::Ones(1, d));
    mk(ln3_b, ".ln3.b", Mat<S>::Zero(1, d));
    mk(w1, ".ff.w1", random_normal<S>(d, cfg.d_ff, rng, ws));
    mk(b1, ".ff.b1", Mat<S>::Zero(1, cfg.d_ff));
    mk(w2, ".ff.w2", random_normal<S>(cfg.d_ff, d, rng, 1.0 / std::sqrt(double(cfg.d_ff))));
    mk(b2, ".ff.b2", Mat<S>::Zero(1, d));
  }

  void collect(std::vector<ad::Parameter<S>*>& out) {
    for (auto* p : {&ln1_g, &ln1_b, &wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo,
                    &ln2_g, &ln2_b, &conv_k, &ln3_g, &ln3_b, &w1, &b1, &w2, &b2})
      out.push_back(p);
  }

  // rows 0..M-2 are block positions, row M-1 is the inherited context
  ad::Var<S> apply(ad::Tape<S>& tape, const ad::Var<S>& input, int heads) {
    const int M = input.rows();
    Mask all = Mask::Constant(M, M, true);
    auto h = ad::layer_norm(input, tape.use(ln1_g), tape.use(ln1_b));
    auto attn = ad::masked_attention(ad::linear(h, tape.use(wq), tape.use(bq)),
                                     ad::linear(h, tape.use(wk), tape.use(bk)),
                                     ad::linear(h, tape.use(wv), tape.use(bv)),
                                     all, heads);
    auto x1 = ad::add(input, ad::linear(attn, tape.use(wo), tape.use(bo)));

    auto blk = ad::slice_rows(x1, 0, M - 1);
    auto ctx = ad::slice_rows(x1, M - 1, 1);
    auto c = ad::layer_norm(blk, tape.use(ln2_g), tape.use(ln2_b));
    c = ad::depthwise_conv1d(c, tape.use(conv_k), ad::ConvPadding::kCausal);
    auto x2 = ad::concat_rows<S>({ad::add(blk, c), ctx});

    auto h3 = ad::layer_norm(x2, tape.use(ln3_g), tape.use(ln3_b));
    return ad::add(x2, ad::feed_forward(h3, tape.use(w1), tape.use(b1),
                                        tape.use(w2), tape.use(b2)));
  }
};

// Context vectors after some block b: ctx[0] is the input-level context
// (mean of block b's subsampled frames), ctx[n] for n in [1, N] is layer
// n's trailing output. Layer n+1 consumes ctx[n] on block b+1.
template <class S>
struct EncoderState {
  int next_block = 0;
  std::vector<ad::Var<S>> ctx;  // n_layers + 1 entries
};

template <class S>
struct EncoderOutput {
  ad::Var<S> h;                      // total_sub x d_model
  std::vector<ad::Var<S>> top_ctx;   // c_{N,b} per block
  EncoderState<S> state;
};

template <class S>
struct Encoder {
  EncoderConfig cfg;
  ad::Parameter<S> sub_w, sub_b;
  std::vector<EncoderLayer<S>> layers;
  std::vector<ad::Parameter<S>> init_ctx;  // consumed by layer n+1 at block 0

  void init(const EncoderConfig& c, Rng& rng) {
    c.validate();
    cfg = c;
    const int stacked = cfg.input_dim * kSubsampleFactor;
    sub_w = ad::Parameter<S>("enc.sub.w",
                             random_normal<S>(stacked, cfg.d_model, rng,
                                              1.0 / std::sqrt(double(stacked))));
    sub_b = ad::Parameter<S>("enc.sub.b", Mat<S>::Zero(1, cfg.d_model));
    layers.resize(cfg.n_layers);
    for (int n = 0; n < cfg.n_layers; ++n)
      layers[n].init("enc.l" + std::to_string(n), cfg, rng);
    init_ctx.clear();
    for (int n = 0; n < cfg.n_layers; ++n)
      init_ctx.emplace_back("enc.ctx0." + std::to_string(n),
                            random_normal<S>(1, cfg.d_model, rng, 1.0));
  }

  std::vector<ad::Parameter<S>*> params() {
    std::vector<ad::Parameter<S>*> out = {&sub_w, &sub_b};
    for (auto& l : layers) l.collect(out);
    for (auto& p : init_ctx) out.push_back(&p);
    return out;
  }

  EncoderState<S> initial_state(ad::Tape<S>& tape) {
    EncoderState<S> st;
    st.next_block = 0;
    st.ctx.reserve(cfg.n_layers + 1);
    for (auto& p : init_ctx) st.ctx.push_back(tape.use(p));
    // top-layer slot: produced from block 0 on, never consumed by a layer
    st.ctx.push_back(tape.constant(Mat<S>::Zero(1, cfg.d_model)));
    return st;
  }

  // Frame stacking by kSubsampleFactor with zero-padded tail, then a linear
  // map to model dimension.
  ad::Var<S> subsample(ad::Tape<S>& tape, const Mat<S>& block_features) {
    if (block_features.rows() == 0) throw ContractError("empty block");
    if (block_features.cols() != cfg.input_dim)
      throw ShapeError("block features " +
                       shape_str(block_features.rows(), block_features.cols()) +
                       ", expected dim " + std::to_string(cfg.input_dim));
    const int T = static_cast<int>(block_features.rows());
    const int out_T = (T + kSubsampleFactor - 1) / kSubsampleFactor;
    Mat<S> stacked = Mat<S>::Zero(out_T, cfg.input_dim * kSubsampleFactor);
    for (int t = 0; t < T; ++t)
      stacked.row(t / kSubsampleFactor)
          .segment((t % kSubsampleFactor) * cfg.input_dim, cfg.input_dim) =
          block_features.row(t);
    return ad::linear(tape.input(std::move(stacked), false), tape.use(sub_w),
                      tape.use(sub_b));
  }

  // Runs one block through the stack; the state must belong to block
  // block_index - 1.
  ad::Var<S> encode_block(ad::Tape<S>& tape, EncoderState<S>& state,
                          int block_index, const Mat<S>& block_features) {
    if (block_index != state.next_block)
      throw SequencingError("state expects block " +
                            std::to_string(state.next_block) + ", got " +
                            std::to_string(block_index));
    auto sub = subsample(tape, block_features);
    const int tau = sub.rows();
    std::vector<ad::Var<S>> new_ctx(cfg.n_layers + 1, ad::Var<S>{});
    new_ctx[0] = ad::mean_rows(sub);
    auto x = sub;
    for (int n = 0; n < cfg.n_layers; ++n) {
      auto out = layers[n].apply(tape, ad::concat_rows<S>({x, state.ctx[n]}),
                                 cfg.heads);
      x = ad::slice_rows(out, 0, tau);
      new_ctx[n + 1] = ad::slice_rows(out, tau, 1);
    }
    state.ctx = std::move(new_ctx);
    ++state.next_block;
    return x;
  }

  EncoderOutput<S> encode_utterance(ad::Tape<S>& tape, const Mat<S>& features,
                                    const BlockPlan& plan) {
    plan.validate();
    if (plan.input_frames != features.rows())
      throw ContractError("plan covers " + std::to_string(plan.input_frames) +
                          " frames, features have " +
                          std::to_string(features.rows()));
    EncoderOutput<S> out;
    out.state = initial_state(tape);
    std::vector<ad::Var<S>> blocks;
    for (int b = 0; b < plan.block_count(); ++b) {
      const auto& blk = plan.blocks[b];
      blocks.push_back(encode_block(
          tape, out.state, b,
          features.middleRows(blk.begin, blk.end - blk.begin)));
      out.top_ctx.push_back(out.state.ctx[cfg.n_layers]);
    }
    out.h = ad::concat_rows<S>(blocks);
    return out;
  }
};

}  // namespace pasr
