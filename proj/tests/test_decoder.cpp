#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "pasr/decoder.hpp"
#include "testutil.hpp"

#include <cmath>
#include <vector>

using namespace pasr;
using namespace pasr::testutil;

namespace {

template <class S>
Decoder<S> make_decoder(int vocab, int d_model, int n_layers, int heads,
                        int d_ff, unsigned seed, int max_prompts = 32,
                        int max_tokens = 16) {
  DecoderConfig cfg;
  cfg.d_model = d_model;
  cfg.n_layers = n_layers;
  cfg.heads = heads;
  cfg.d_ff = d_ff;
  cfg.max_prompts = max_prompts;
  cfg.max_tokens = max_tokens;
  Decoder<S> dec;
  Rng rng(seed);
  dec.init(cfg, vocab, rng);
  return dec;
}

template <class S>
S max_abs_diff(const Mat<S>& a, const Mat<S>& b) {
  REQUIRE(a.rows() == b.rows());
  REQUIRE(a.cols() == b.cols());
  if (a.size() == 0) return S(0);
  return (a - b).cwiseAbs().maxCoeff();
}

template <class S>
Mat<S> batch_rows(Decoder<S>& dec, const Mat<S>& prompts,
                  const std::vector<int>& tokens, const Mask* mask = nullptr) {
  ad::Tape<S> tape(false);
  auto p = tape.constant(prompts);
  auto out = dec.batch_forward(tape, p, tokens, mask);
  return out.value();
}

}  // namespace

TEST_CASE("batch forward emits one normalized row per token") {
  auto dec = make_decoder<float>(5, 16, 2, 2, 32, 11);
  Rng rng(3);
  Mat<float> prompts = random_normal<float>(4, 16, rng, 1.0);
  std::vector<int> tokens = {dec.sos_id(), 2, 0, 4};
  Mat<float> out = batch_rows(dec, prompts, tokens);
  REQUIRE(out.rows() == 4);
  REQUIRE(out.cols() == 6);
  for (int i = 0; i < out.rows(); ++i) {
    float lse = std::log(out.row(i).array().exp().sum());
    CHECK(std::abs(lse) < 1e-5f);
  }
}

TEST_CASE("score_next sequence matches one batch forward") {
  auto dec = make_decoder<float>(6, 16, 2, 4, 32, 21);
  Rng rng(7);
  Mat<float> prompts = random_normal<float>(5, 16, rng, 1.0);
  std::vector<int> tokens = {dec.sos_id(), 1, 5, 0, 3};

  auto session = dec.open_session();
  session.ingest_prompt_rows(prompts);
  Mat<float> inc(static_cast<int>(tokens.size()), dec.n_outputs());
  for (size_t i = 0; i < tokens.size(); ++i)
    inc.row(static_cast<int>(i)) = session.score_next(tokens[i]);

  Mat<float> batch = batch_rows(dec, prompts, tokens);
  CHECK(max_abs_diff(inc, batch) <= 1e-5f);

  for (int i = 0; i < inc.rows(); ++i) {
    float lse = std::log(inc.row(i).array().exp().sum());
    CHECK(std::abs(lse) < 1e-5f);
  }
}

TEST_CASE("zero-prompt session reproduces the plain language model") {
  auto dec = make_decoder<float>(4, 16, 2, 2, 32, 31);
  std::vector<int> tokens = {dec.sos_id(), 2, 1, 1};

  auto session = dec.open_session();
  Mat<float> inc(static_cast<int>(tokens.size()), dec.n_outputs());
  for (size_t i = 0; i < tokens.size(); ++i)
    inc.row(static_cast<int>(i)) = session.score_next(tokens[i]);

  Mat<float> lm = batch_rows(dec, Mat<float>(0, 16), tokens);
  CHECK(max_abs_diff(inc, lm) <= 1e-5f);
}

TEST_CASE("interleaved chunk ingestion matches the masked batch forward") {
  auto dec = make_decoder<float>(5, 16, 2, 2, 32, 41);
  Rng rng(13);
  Mat<float> part0 = random_normal<float>(3, 16, rng, 1.0);
  Mat<float> part1 = random_normal<float>(2, 16, rng, 1.0);
  Mat<float> all(5, 16);
  all << part0, part1;

  auto session = dec.open_session();
  ad::Tape<float> chunk_tape(false);
  PromptChunk<float> c0{0, chunk_tape.constant(part0), {0, 2, 5}, false, false};
  PromptChunk<float> c1{1, chunk_tape.constant(part1), {9}, true, false};

  session.ingest_chunk(c0);
  std::vector<int> tokens = {dec.sos_id(), 4, 2, 0};
  Mat<float> inc(4, dec.n_outputs());
  inc.row(0) = session.score_next(tokens[0]);
  inc.row(1) = session.score_next(tokens[1]);
  session.ingest_chunk(c1);
  inc.row(2) = session.score_next(tokens[2]);
  inc.row(3) = session.score_next(tokens[3]);

  Mask vis = Mask::Constant(4, 5, true);
  vis(0, 3) = vis(0, 4) = false;
  vis(1, 3) = vis(1, 4) = false;
  Mat<float> batch = batch_rows(dec, all, tokens, &vis);
  CHECK(max_abs_diff(inc, batch) <= 1e-5f);

  SUBCASE("chunks must arrive in block order") {
    auto fresh = dec.open_session();
    CHECK_THROWS_AS(fresh.ingest_chunk(c1), SequencingError);
  }
}

TEST_CASE("prompt cache does not depend on interleaved tokens") {
  auto dec = make_decoder<float>(5, 16, 2, 2, 32, 51);
  Rng rng(17);
  Mat<float> a = random_normal<float>(2, 16, rng, 1.0);
  Mat<float> b = random_normal<float>(3, 16, rng, 1.0);

  auto clean = dec.open_session();
  clean.ingest_prompt_rows(a);
  clean.ingest_prompt_rows(b);

  auto busy = dec.open_session();
  busy.ingest_prompt_rows(a);
  busy.score_next(dec.sos_id());
  busy.score_next(1);
  busy.score_next(3);
  Mat<float> tok_before = busy.token_cache_k(0);
  busy.ingest_prompt_rows(b);

  for (int l = 0; l < 2; ++l) {
    CHECK(max_abs_diff(clean.prompt_cache_k(l), busy.prompt_cache_k(l)) == 0.0f);
  }
  CHECK(max_abs_diff(tok_before, busy.token_cache_k(0)) == 0.0f);
  CHECK(busy.prompt_positions() == 6);  // start prompt + 5
}

TEST_CASE("session ledger records kinds, indices, and visible prompt counts") {
  auto dec = make_decoder<float>(4, 16, 1, 2, 32, 61);
  Rng rng(19);
  auto session = dec.open_session();
  session.ingest_prompt_rows(random_normal<float>(2, 16, rng, 1.0));
  session.score_next(dec.sos_id());
  session.ingest_prompt_rows(random_normal<float>(1, 16, rng, 1.0));
  session.score_next(2);

  const auto& led = session.ledger();
  REQUIRE(led.size() == 6);
  const char kinds[] = {'p', 'p', 'p', 't', 'p', 't'};
  const int index[] = {0, 1, 2, 0, 3, 1};
  const int jvis[] = {1, 2, 3, 3, 4, 4};
  for (int i = 0; i < 6; ++i) {
    CHECK(led[i].kind == kinds[i]);
    CHECK(led[i].index == index[i]);
    CHECK(led[i].j_visible == jvis[i]);
  }
}

TEST_CASE("fork shares prompt cache and isolates token extensions") {
  auto dec = make_decoder<float>(5, 16, 2, 2, 32, 71);
  Rng rng(23);
  Mat<float> prompts = random_normal<float>(3, 16, rng, 1.0);

  auto base = dec.open_session();
  base.ingest_prompt_rows(prompts);
  base.score_next(dec.sos_id());
  base.score_next(1);

  auto f1 = base.fork();
  auto f2 = base.fork();
  CHECK(f1.prompt_cache_data(0) == base.prompt_cache_data(0));
  CHECK(f2.prompt_cache_data(1) == base.prompt_cache_data(1));
  CHECK(f1.token_cache_k(0).data() != base.token_cache_k(0).data());

  Mat<float> before_a = f2.fork().score_next(3);
  Mat<float> row_a = f1.score_next(2);
  Mat<float> row_b = f2.score_next(3);
  CHECK(max_abs_diff(before_a, row_b) == 0.0f);  // f1's step left f2 alone

  SUBCASE("each branch equals a fresh session replaying its history") {
    auto replay = dec.open_session();
    replay.ingest_prompt_rows(prompts);
    replay.score_next(dec.sos_id());
    replay.score_next(1);
    Mat<float> fresh = replay.score_next(2);
    CHECK(max_abs_diff(fresh, row_a) <= 1e-7f);
  }

  SUBCASE("prompt ingestion on one branch never reaches the other") {
    auto f3 = base.fork();
    Mat<float> extra = random_normal<float>(2, 16, rng, 1.0);
    f3.ingest_prompt_rows(extra);
    CHECK(f3.prompt_positions() == 6);
    CHECK(base.prompt_positions() == 4);
    Mat<float> control = base.fork().score_next(4);
    Mat<float> after = base.score_next(4);
    CHECK(max_abs_diff(control, after) == 0.0f);
  }
}

TEST_CASE("all-visible mask reproduces the unmasked forward") {
  auto dec = make_decoder<float>(5, 16, 2, 2, 32, 81);
  Rng rng(29);
  Mat<float> prompts = random_normal<float>(4, 16, rng, 1.0);
  std::vector<int> tokens = {dec.sos_id(), 0, 3};
  Mask vis = Mask::Constant(3, 4, true);
  Mat<float> masked = batch_rows(dec, prompts, tokens, &vis);
  Mat<float> plain = batch_rows(dec, prompts, tokens);
  CHECK(max_abs_diff(masked, plain) == 0.0f);
}

TEST_CASE("hiding every prompt reduces each row to the language model") {
  auto dec = make_decoder<float>(5, 16, 2, 2, 32, 91);
  Rng rng(31);
  Mat<float> prompts = random_normal<float>(4, 16, rng, 1.0);
  std::vector<int> tokens = {dec.sos_id(), 2, 2, 1};
  Mask vis = Mask::Constant(4, 4, false);
  Mat<float> hidden = batch_rows(dec, prompts, tokens, &vis);
  Mat<float> lm = batch_rows(dec, Mat<float>(0, 16), tokens);
  CHECK(max_abs_diff(hidden, lm) <= 1e-5f);
}

TEST_CASE("constant visibility equals physically truncated prompts") {
  auto dec = make_decoder<float>(5, 16, 2, 2, 32, 101);
  Rng rng(37);
  Mat<float> prompts = random_normal<float>(5, 16, rng, 1.0);
  std::vector<int> tokens = {dec.sos_id(), 1, 4, 0};

  Mask vis = Mask::Constant(4, 5, false);
  vis.leftCols(2).setConstant(true);  // every target sees prompts 0..1 only
  Mat<float> masked = batch_rows(dec, prompts, tokens, &vis);
  Mat<float> truncated =
      batch_rows(dec, Mat<float>(prompts.topRows(2)), tokens);
  CHECK(max_abs_diff(masked, truncated) <= 1e-5f);
}

TEST_CASE("prefix-shaped visibility matches an interleaved session") {
  auto dec = make_decoder<float>(6, 16, 2, 4, 32, 111);
  Rng rng(41);
  Mat<float> prompts = random_normal<float>(4, 16, rng, 1.0);
  std::vector<int> tokens = {dec.sos_id(), 3, 5, 2, 0};
  const int visible[] = {0, 1, 1, 4, 4};  // prompts seen by each target

  Mask vis = Mask::Constant(5, 4, false);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < visible[i]; ++j) vis(i, j) = true;
  Mat<float> masked = batch_rows(dec, prompts, tokens, &vis);

  auto session = dec.open_session();
  int ingested = 0;
  Mat<float> inc(5, dec.n_outputs());
  for (int i = 0; i < 5; ++i) {
    if (visible[i] > ingested) {
      session.ingest_prompt_rows(
          Mat<float>(prompts.middleRows(ingested, visible[i] - ingested)));
      ingested = visible[i];
    }
    inc.row(i) = session.score_next(tokens[i]);
  }
  CHECK(max_abs_diff(inc, masked) <= 1e-5f);
}

TEST_CASE("malformed inputs are rejected") {
  auto dec = make_decoder<float>(4, 16, 1, 2, 32, 121, /*max_prompts=*/4,
                                 /*max_tokens=*/3);
  Rng rng(43);
  Mat<float> prompts = random_normal<float>(2, 16, rng, 1.0);

  ad::Tape<float> tape(false);
  auto p = tape.constant(prompts);
  CHECK_THROWS_AS(dec.batch_forward(tape, p, {}), ContractError);
  CHECK_THROWS_AS(dec.batch_forward(tape, p, {dec.sos_id(), 6}), TargetError);
  CHECK_THROWS_AS(dec.batch_forward(tape, p, {-1}), TargetError);

  Mask bad = Mask::Constant(2, 3, true);
  std::vector<int> toks = {dec.sos_id(), 1};
  CHECK_THROWS_AS(dec.batch_forward(tape, p, toks, &bad), ContractError);

  auto wide = tape.constant(random_normal<float>(1, 8, rng, 1.0));
  CHECK_THROWS_AS(dec.batch_forward(tape, wide, {dec.sos_id()}), ShapeError);

  std::vector<int> long_toks = {dec.sos_id(), 0, 1, 2};
  CHECK_THROWS_AS(dec.batch_forward(tape, p, long_toks), TargetError);

  auto session = dec.open_session();
  CHECK_THROWS_AS(session.score_next(9), TargetError);
  session.score_next(dec.sos_id());
  session.score_next(0);
  session.score_next(1);
  CHECK_THROWS_AS(session.score_next(2), TargetError);  // token table exhausted
  CHECK_THROWS_AS(
      session.ingest_prompt_rows(random_normal<float>(4, 16, rng, 1.0)),
      TargetError);  // prompt table exhausted
  CHECK_THROWS_AS(session.ingest_prompt_rows(random_normal<float>(1, 8, rng, 1.0)),
                  ShapeError);
}

TEST_CASE("gradients through the batch forward agree with finite differences") {
  auto dec = make_decoder<double>(3, 8, 2, 2, 16, 131, 16, 8);
  Rng rng(47);
  MatD prompts = away_from_zero(random_normal<double>(3, 8, rng, 0.8));
  std::vector<int> tokens = {dec.sos_id(), 1, 0};
  Mask vis = Mask::Constant(3, 3, false);
  vis(0, 0) = true;
  vis(1, 0) = vis(1, 1) = true;
  vis(2, 0) = vis(2, 1) = vis(2, 2) = true;
  MatD w = random_normal<double>(3, 4, rng, 1.0);

  SUBCASE("with respect to the prompt inputs") {
    auto build = [&](ad::Tape<double>& tape, std::vector<ad::Var<double>>& xs) {
      auto out = dec.batch_forward(tape, xs[0], tokens, &vis);
      return ad::sum_all(ad::hadamard(out, tape.constant(w)));
    };
    CHECK(fd_max_rel_err(build, {prompts}) < 1e-3);
  }

  SUBCASE("with respect to every decoder parameter") {
    auto run = [&](bool with_grad) {
      ad::Tape<double> tape(with_grad);
      auto p = tape.constant(prompts);
      auto out = dec.batch_forward(tape, p, tokens, &vis);
      auto s = ad::sum_all(ad::hadamard(out, tape.constant(w)));
      if (with_grad) tape.backward(s);
      return s.value()(0, 0);
    };
    for (auto* prm : dec.params()) prm->zero_grad();
    run(true);
    CHECK(fd_params_max_rel_err([&]() { return run(false); }, dec.params(),
                                1e-4, 40) < 1e-3);
  }
}
