#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "pasr/encoder.hpp"
#include "testutil.hpp"

using namespace pasr;

namespace {

EncoderConfig tiny_cfg() {
  EncoderConfig c;
  c.input_dim = 3;
  c.d_model = 8;
  c.n_layers = 2;
  c.heads = 2;
  c.d_ff = 16;
  c.block_len = 2;  // 8 input frames per block
  return c;
}

Encoder<double> tiny_encoder(unsigned seed) {
  Encoder<double> enc;
  Rng rng(seed);
  enc.init(tiny_cfg(), rng);
  return enc;
}

double weighted(const MatD& h) {
  double acc = 0;
  for (int i = 0; i < h.rows(); ++i)
    for (int j = 0; j < h.cols(); ++j) acc += (0.21 + 0.13 * i - 0.05 * j) * h(i, j);
  return acc;
}

}  // namespace

TEST_CASE("block plans partition the utterance with ceil subsampling") {
  BlockPlan p = BlockPlan::make(37, 2);  // 8 input frames per block
  CHECK(p.block_count() == 5);
  CHECK(p.blocks.back().end - p.blocks.back().begin == 5);
  CHECK(p.blocks.back().sub_len == 2);
  int sum = 0;
  for (const auto& b : p.blocks) sum += b.sub_len;
  CHECK(sum == p.total_sub);
  CHECK(p.total_sub == 10);  // ceil(8/4)*4 blocks + ceil(5/4)
  CHECK_THROWS_AS(BlockPlan::make(0, 2), ContractError);
  CHECK_THROWS_AS(BlockPlan::make(10, 0), ConfigError);

  BlockPlan broken = p;
  broken.blocks[1].begin += 1;
  CHECK_THROWS_AS(broken.validate(), ContractError);
}

TEST_CASE("subsample stacks four frames and zero-pads the tail") {
  auto enc = tiny_encoder(1);
  ad::Tape<double> t(false);
  Rng rng(2);
  MatD x8 = testutil::randn(8, 3, rng);
  CHECK(enc.subsample(t, x8).rows() == 2);
  MatD x7 = x8.topRows(7);
  auto sub7 = enc.subsample(t, x7);
  CHECK(sub7.rows() == 2);

  // second stacked row of the 7-frame input is [f4 f5 f6 0] * W + b
  MatD stacked = MatD::Zero(1, 12);
  stacked.row(0).segment(0, 3) = x7.row(4);
  stacked.row(0).segment(3, 3) = x7.row(5);
  stacked.row(0).segment(6, 3) = x7.row(6);
  MatD expect = stacked * enc.sub_w.value + enc.sub_b.value;
  CHECK((sub7.value().row(1) - expect.row(0)).cwiseAbs().maxCoeff() < 1e-12);

  CHECK_THROWS_AS(enc.subsample(t, MatD::Zero(0, 3)), ContractError);
  CHECK_THROWS_AS(enc.subsample(t, MatD::Zero(4, 5)), ShapeError);
}

TEST_CASE("subsample is affine: S(a+b) + S(0) = S(a) + S(b)") {
  auto enc = tiny_encoder(3);
  ad::Tape<double> t(false);
  Rng rng(4);
  MatD a = testutil::randn(7, 3, rng), b = testutil::randn(7, 3, rng);
  MatD lhs = ad::add(enc.subsample(t, a + b), enc.subsample(t, MatD::Zero(7, 3)))
                 .value();
  MatD rhs = ad::add(enc.subsample(t, a), enc.subsample(t, b)).value();
  CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("single block equals the plain layer stack over the same positions") {
  auto enc = tiny_encoder(5);
  ad::Tape<double> t(false);
  Rng rng(6);
  MatD x = testutil::randn(8, 3, rng);
  BlockPlan plan = BlockPlan::make(8, 2);
  auto out = enc.encode_utterance(t, x, plan);

  // hand-built forward: subsample, append each layer's initial context,
  // split block rows back out
  auto cur = enc.subsample(t, x);
  for (int n = 0; n < enc.cfg.n_layers; ++n) {
    auto full = enc.layers[n].apply(
        t, ad::concat_rows<double>({cur, t.use(enc.init_ctx[n])}), enc.cfg.heads);
    cur = ad::slice_rows(full, 0, 2);
  }
  CHECK((out.h.value() - cur.value()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("two blocks equal the hand-unrolled context chain") {
  auto enc = tiny_encoder(7);
  ad::Tape<double> t(false);
  Rng rng(8);
  MatD x = testutil::randn(16, 3, rng);
  BlockPlan plan = BlockPlan::make(16, 2);
  auto out = enc.encode_utterance(t, x, plan);

  // unrolled: block 0 with learned contexts, block 1 with block 0's outputs
  std::vector<ad::Var<double>> ctx;
  for (auto& p : enc.init_ctx) ctx.push_back(t.use(p));
  auto run_block = [&](const MatD& feats) {
    auto cur = enc.subsample(t, feats);
    std::vector<ad::Var<double>> new_ctx;
    new_ctx.push_back(ad::mean_rows(cur));
    for (int n = 0; n < enc.cfg.n_layers; ++n) {
      auto full = enc.layers[n].apply(t, ad::concat_rows<double>({cur, ctx[n]}),
                                      enc.cfg.heads);
      cur = ad::slice_rows(full, 0, cur.rows());
      new_ctx.push_back(ad::slice_rows(full, cur.rows(), 1));
    }
    ctx = new_ctx;  // layers consume entries [0, N)
    return cur;
  };
  auto h0 = run_block(x.topRows(8));
  auto h1 = run_block(x.bottomRows(8));
  MatD manual(4, enc.cfg.d_model);
  manual << h0.value(), h1.value();
  CHECK((out.h.value() - manual).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("encode_utterance matches iterated encode_block bit-exactly") {
  auto enc = tiny_encoder(9);
  ad::Tape<double> t(false);
  Rng rng(10);
  MatD x = testutil::randn(21, 3, rng);
  BlockPlan plan = BlockPlan::make(21, 2);
  auto batch = enc.encode_utterance(t, x, plan);

  auto st = enc.initial_state(t);
  std::vector<MatD> hs;
  for (int b = 0; b < plan.block_count(); ++b) {
    const auto& blk = plan.blocks[b];
    hs.push_back(
        enc.encode_block(t, st, b, x.middleRows(blk.begin, blk.end - blk.begin))
            .value());
  }
  int row = 0;
  for (const auto& h : hs) {
    CHECK((batch.h.value().middleRows(row, h.rows()) - h).cwiseAbs().maxCoeff() ==
          0.0);
    row += static_cast<int>(h.rows());
  }
  CHECK(row == plan.total_sub);
}

TEST_CASE("context vectors actually carry information forward") {
  auto enc = tiny_encoder(11);
  Rng rng(12);
  MatD x = testutil::randn(16, 3, rng);

  ad::Tape<double> t(false);
  auto st = enc.initial_state(t);
  enc.encode_block(t, st, 0, x.topRows(8));
  auto clean = enc.encode_block(t, st, 1, x.bottomRows(8)).value();

  // rerun with the top-layer-but-one context perturbed between blocks
  ad::Tape<double> t2(false);
  auto st2 = enc.initial_state(t2);
  enc.encode_block(t2, st2, 0, x.topRows(8));
  // a uniform shift would be erased by layer norm; bump one coordinate
  const int n = enc.cfg.n_layers - 1;
  MatD bumped = st2.ctx[n].value();
  bumped(0, 0) += 0.5;
  st2.ctx[n] = t2.constant(bumped);
  auto perturbed = enc.encode_block(t2, st2, 1, x.bottomRows(8)).value();

  CHECK((clean - perturbed).cwiseAbs().maxCoeff() > 1e-6);
}

TEST_CASE("outputs are causal in the block stream") {
  auto enc = tiny_encoder(13);
  Rng rng(14);
  MatD x = testutil::randn(24, 3, rng);
  BlockPlan plan = BlockPlan::make(24, 2);

  ad::Tape<double> t(false);
  auto base = enc.encode_utterance(t, x, plan);

  MatD x2 = x;
  x2.bottomRows(8).setConstant(123.0);  // clobber the final block
  ad::Tape<double> t2(false);
  auto mod = enc.encode_utterance(t2, x2, plan);

  const int prefix = plan.total_sub - plan.blocks.back().sub_len;
  CHECK((base.h.value().topRows(prefix) - mod.h.value().topRows(prefix))
            .cwiseAbs()
            .maxCoeff() == 0.0);
  CHECK((base.h.value().bottomRows(2) - mod.h.value().bottomRows(2))
            .cwiseAbs()
            .maxCoeff() > 1e-6);
}

TEST_CASE("state sequencing is enforced") {
  auto enc = tiny_encoder(15);
  ad::Tape<double> t(false);
  Rng rng(16);
  MatD x = testutil::randn(8, 3, rng);
  auto st = enc.initial_state(t);
  CHECK_THROWS_AS(enc.encode_block(t, st, 1, x), SequencingError);
  enc.encode_block(t, st, 0, x);
  CHECK_THROWS_AS(enc.encode_block(t, st, 0, x), SequencingError);

  BlockPlan plan = BlockPlan::make(12, 2);
  CHECK_THROWS_AS(enc.encode_utterance(t, x, plan), ContractError);
}

TEST_CASE("every encoder parameter's gradient matches finite differences") {
  auto enc = tiny_encoder(17);
  Rng rng(18);
  MatD x = testutil::randn(14, 3, rng);  // two blocks, short tail
  BlockPlan plan = BlockPlan::make(14, 2);

  auto loss_fn = [&]() {
    ad::Tape<double> t(false);
    return weighted(enc.encode_utterance(t, x, plan).h.value());
  };

  for (auto* p : enc.params()) p->zero_grad();
  ad::Tape<double> t;
  auto out = enc.encode_utterance(t, x, plan);
  MatD w(out.h.rows(), out.h.cols());
  for (int i = 0; i < w.rows(); ++i)
    for (int j = 0; j < w.cols(); ++j) w(i, j) = 0.21 + 0.13 * i - 0.05 * j;
  t.backward(ad::sum_all(ad::hadamard(out.h, t.constant(w))));

  CHECK(testutil::fd_params_max_rel_err(loss_fn, enc.params()) < 1e-3);
}
