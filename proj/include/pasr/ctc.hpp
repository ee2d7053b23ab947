#pragma once

// CTC over a per-frame posterior grid: loss via the forward algorithm,
// greedy decoding, Viterbi forced alignment, and the prefix-probability
// recursion used during fused beam search. Grid coordinates reserve
// column 0 for blank; content token c sits at column c+1. All
// accumulation is in log space.

#include "pasr/autodiff.hpp"
#include "pasr/common.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <memory>
#include <utility>
#include <vector>

namespace pasr::ctc {

inline constexpr int kBlank = 0;
inline constexpr int to_grid(int content) { return content + 1; }
inline constexpr int to_content(int grid_sym) { return grid_sym - 1; }

template <class S>
struct PosteriorGrid {
  Mat<S> q;     // probabilities, frames x (V+1)
  Mat<S> logq;

  int frames() const { return static_cast<int>(q.rows()); }
  int symbols() const { return static_cast<int>(q.cols()); }

  static PosteriorGrid from_probs(Mat<S> probs) {
    for (int t = 0; t < probs.rows(); ++t) {
      S row_sum = probs.row(t).sum();
      if (std::abs(row_sum - S(1)) > S(1e-5))
        throw ContractError("posterior row " + std::to_string(t) + " sums to " +
                            std::to_string(double(row_sum)));
      for (int k = 0; k < probs.cols(); ++k)
        if (!(probs(t, k) > S(0)) || probs(t, k) > S(1))
          throw ContractError("posterior entry (" + std::to_string(t) + ", " +
                              std::to_string(k) + ") outside (0, 1]");
    }
    PosteriorGrid g;
    g.logq = probs.array().log().matrix();
    g.q = std::move(probs);
    return g;
  }

  static PosteriorGrid from_logits(const Mat<S>& logits) {
    PosteriorGrid g;
    g.logq = logits;
    for (int t = 0; t < g.logq.rows(); ++t) log_softmax_row<S>(g.logq.row(t));
    g.q = g.logq.array().exp().matrix();
    return g;
  }
};

namespace detail {

// Extended state s: even -> blank, odd -> y[(s-1)/2]. Symbols in grid coords.
inline std::vector<int> ext_symbols(const std::vector<int>& y_grid) {
  std::vector<int> sym(2 * y_grid.size() + 1, kBlank);
  for (size_t i = 0; i < y_grid.size(); ++i) sym[2 * i + 1] = y_grid[i];
  return sym;
}

inline int min_frames(const std::vector<int>& y_grid) {
  int need = static_cast<int>(y_grid.size());
  for (size_t i = 1; i < y_grid.size(); ++i) need += y_grid[i] == y_grid[i - 1];
  return need;
}

inline std::vector<int> to_grid_seq(const std::vector<int>& y_content, int symbols) {
  std::vector<int> g;
  g.reserve(y_content.size());
  for (int c : y_content) {
    if (c < 0 || to_grid(c) >= symbols)
      throw TargetError("content token " + std::to_string(c) +
                        " outside grid of " + std::to_string(symbols) + " symbols");
    g.push_back(to_grid(c));
  }
  return g;
}

inline void check_feasible(int frames, const std::vector<int>& y_grid) {
  int need = min_frames(y_grid);
  if (frames < need)
    throw InfeasibleAlignmentError(
        std::to_string(frames) + " frames cannot align " +
        std::to_string(y_grid.size()) + " tokens needing " + std::to_string(need));
}

template <class S>
bool skip_allowed(const std::vector<int>& sym, int s) {
  return s > 1 && sym[s] != kBlank && sym[s] != sym[s - 2];
}

}  // namespace detail

// log p(y | grid) by the forward algorithm over blank-interleaved states.
template <class S>
S log_prob(const Mat<S>& logq, const std::vector<int>& y_content) {
  const int T = static_cast<int>(logq.rows());
  auto y = detail::to_grid_seq(y_content, static_cast<int>(logq.cols()));
  detail::check_feasible(T, y);
  if (T == 0) return S(0);  // only the empty transcript is feasible
  const auto sym = detail::ext_symbols(y);
  const int NS = static_cast<int>(sym.size());
  std::vector<S> a(NS, neg_inf<S>()), nxt(NS);
  a[0] = logq(0, kBlank);
  if (NS > 1) a[1] = logq(0, sym[1]);
  for (int t = 1; t < T; ++t) {
    for (int s = 0; s < NS; ++s) {
      S m = a[s];
      if (s > 0) m = log_add(m, a[s - 1]);
      if (detail::skip_allowed<S>(sym, s)) m = log_add(m, a[s - 2]);
      nxt[s] = m == neg_inf<S>() ? m : m + logq(t, sym[s]);
    }
    a.swap(nxt);
  }
  return NS > 1 ? log_add(a[NS - 1], a[NS - 2]) : a[0];
}

// log p(y) plus the per-frame symbol occupancy Γ (frames x symbols, rows sum
// to 1): the posterior probability that frame t's alignment emits symbol k.
template <class S>
std::pair<S, Mat<S>> log_prob_with_occupancy(const Mat<S>& logq,
                                             const std::vector<int>& y_content) {
  const int T = static_cast<int>(logq.rows());
  const int K = static_cast<int>(logq.cols());
  auto y = detail::to_grid_seq(y_content, K);
  detail::check_feasible(T, y);
  if (T == 0) return {S(0), Mat<S>(0, K)};
  const auto sym = detail::ext_symbols(y);
  const int NS = static_cast<int>(sym.size());

  Mat<S> alpha = Mat<S>::Constant(T, NS, neg_inf<S>());
  alpha(0, 0) = logq(0, kBlank);
  if (NS > 1) alpha(0, 1) = logq(0, sym[1]);
  for (int t = 1; t < T; ++t)
    for (int s = 0; s < NS; ++s) {
      S m = alpha(t - 1, s);
      if (s > 0) m = log_add(m, alpha(t - 1, s - 1));
      if (detail::skip_allowed<S>(sym, s)) m = log_add(m, alpha(t - 1, s - 2));
      alpha(t, s) = m == neg_inf<S>() ? m : m + logq(t, sym[s]);
    }
  const S logp = NS > 1 ? log_add(alpha(T - 1, NS - 1), alpha(T - 1, NS - 2))
                        : alpha(T - 1, 0);

  // beta excludes the frame-t emission so alpha + beta is the full path mass
  Mat<S> beta = Mat<S>::Constant(T, NS, neg_inf<S>());
  beta(T - 1, NS - 1) = S(0);
  if (NS > 1) beta(T - 1, NS - 2) = S(0);
  for (int t = T - 2; t >= 0; --t)
    for (int s = 0; s < NS; ++s) {
      S m = beta(t + 1, s) == neg_inf<S>()
                ? neg_inf<S>()
                : beta(t + 1, s) + logq(t + 1, sym[s]);
      if (s + 1 < NS && beta(t + 1, s + 1) != neg_inf<S>())
        m = log_add(m, beta(t + 1, s + 1) + logq(t + 1, sym[s + 1]));
      if (s + 2 < NS && detail::skip_allowed<S>(sym, s + 2) &&
          beta(t + 1, s + 2) != neg_inf<S>())
        m = log_add(m, beta(t + 1, s + 2) + logq(t + 1, sym[s + 2]));
      beta(t, s) = m;
    }

  Mat<S> occ = Mat<S>::Zero(T, K);
  for (int t = 0; t < T; ++t) {
    std::vector<S> acc(K, neg_inf<S>());
    for (int s = 0; s < NS; ++s) {
      S m = alpha(t, s) + beta(t, s);
      if (m != neg_inf<S>()) acc[sym[s]] = log_add(acc[sym[s]], m);
    }
    for (int k = 0; k < K; ++k)
      occ(t, k) = acc[k] == neg_inf<S>() ? S(0) : std::exp(acc[k] - logp);
  }
  return {logp, std::move(occ)};
}

// Differentiable CTC loss on unnormalized logits: -log p(y | softmax rows).
template <class S>
ad::Var<S> loss(ad::Tape<S>& tape, const ad::Var<S>& logits,
                const std::vector<int>& y_content) {
  Mat<S> logq = logits.value();
  for (int t = 0; t < logq.rows(); ++t) log_softmax_row<S>(logq.row(t));
  auto [logp, occ] = log_prob_with_occupancy(logq, y_content);
  Mat<S> out(1, 1);
  out(0, 0) = -logp;
  auto probs = std::make_shared<Mat<S>>(logq.array().exp().matrix());
  auto occupancy = std::make_shared<Mat<S>>(std::move(occ));
  int li = logits.id;
  return tape.emit(std::move(out), tape.requires_grad(li),
                   [li, probs, occupancy](const Mat<S>& g, ad::Tape<S>& tp) {
                     tp.accumulate(li, Mat<S>((*probs - *occupancy) * g(0, 0)));
                   });
}

// Merge adjacent repeats, then delete blanks. Input in grid coordinates,
// output in content ids.
inline std::vector<int> collapse(const std::vector<int>& z) {
  std::vector<int> y;
  int prev = -1;
  for (int s : z) {
    if (s < 0) throw ContractError("negative symbol in alignment");
    if (s != prev && s != kBlank) y.push_back(to_content(s));
    prev = s;
  }
  return y;
}

template <class S>
struct GreedyResult {
  std::vector<int> z;  // per-frame argmax, grid coordinates
  std::vector<int> y;  // collapsed content ids
};

// Per-frame argmax then collapse; ties go to the lowest symbol index.
template <class S>
GreedyResult<S> greedy_decode(const PosteriorGrid<S>& grid) {
  GreedyResult<S> r;
  r.z.reserve(grid.frames());
  for (int t = 0; t < grid.frames(); ++t) {
    int best = 0;
    for (int k = 1; k < grid.symbols(); ++k)
      if (grid.q(t, k) > grid.q(t, best)) best = k;
    r.z.push_back(best);
  }
  r.y = collapse(r.z);
  return r;
}

template <class S>
struct ForcedAlignment {
  std::vector<int> state_per_frame;   // extended state index
  std::vector<int> symbol_per_frame;  // grid coordinates
  std::vector<int> emit_frame;        // first frame aligned to token i
  std::vector<int> end_frame;         // last frame aligned to token i
  S log_prob = 0;
};

// Viterbi best path through the blank-interleaved state graph. Ties prefer
// the path that enters each label state earliest.
template <class S>
ForcedAlignment<S> forced_align(const PosteriorGrid<S>& grid,
                                const std::vector<int>& y_content) {
  const int T = grid.frames();
  auto y = detail::to_grid_seq(y_content, grid.symbols());
  detail::check_feasible(T, y);
  const auto sym = detail::ext_symbols(y);
  const int NS = static_cast<int>(sym.size());
  const int L = static_cast<int>(y.size());
  const Mat<S>& logq = grid.logq;

  Mat<S> delta = Mat<S>::Constant(T, NS, neg_inf<S>());
  Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> pred(T, NS);
  pred.setConstant(-1);
  delta(0, 0) = logq(0, kBlank);
  if (NS > 1) delta(0, 1) = logq(0, sym[1]);
  for (int t = 1; t < T; ++t)
    for (int s = 0; s < NS; ++s) {
      // candidates ordered so ties keep the largest predecessor (earliest
      // entry into the current state)
      S best = delta(t - 1, s);
      int arg = s;
      if (s > 0 && delta(t - 1, s - 1) > best) {
        best = delta(t - 1, s - 1);
        arg = s - 1;
      }
      if (detail::skip_allowed<S>(sym, s) && delta(t - 1, s - 2) > best) {
        best = delta(t - 1, s - 2);
        arg = s - 2;
      }
      if (best == neg_inf<S>()) continue;
      delta(t, s) = best + logq(t, sym[s]);
      pred(t, s) = arg;
    }

  int s_end = NS - 1;
  if (NS > 1 && delta(T - 1, NS - 2) > delta(T - 1, NS - 1)) s_end = NS - 2;
  if (delta(T - 1, s_end) == neg_inf<S>())
    throw InfeasibleAlignmentError("no admissible alignment path");

  ForcedAlignment<S> fa;
  fa.log_prob = delta(T - 1, s_end);
  fa.state_per_frame.assign(T, 0);
  int s = s_end;
  for (int t = T - 1; t >= 0; --t) {
    fa.state_per_frame[t] = s;
    if (t > 0) s = pred(t, s);
  }
  fa.symbol_per_frame.resize(T);
  fa.emit_frame.assign(L, -1);
  fa.end_frame.assign(L, -1);
  for (int t = 0; t < T; ++t) {
    int st = fa.state_per_frame[t];
    fa.symbol_per_frame[t] = sym[st];
    if (st % 2 == 1) {
      int i = (st - 1) / 2;
      if (fa.emit_frame[i] < 0) fa.emit_frame[i] = t;
      fa.end_frame[i] = t;
    }
  }
  if (collapse(fa.symbol_per_frame) != y_content)
    throw ContractError("alignment does not collapse to the reference");
  return fa;
}

// ─── prefix probabilities ───────────────────────────────────────────────────

template <class S>
struct PrefixScore {
  S b = neg_inf<S>();  // log mass of alignments ending in blank
  S n = neg_inf<S>();  // log mass ending in the prefix's last token

  S total() const { return log_add(b, n); }

  // empty prefix before any frame
  static PrefixScore initial() { return {S(0), neg_inf<S>()}; }
  // a prefix not yet alive in the beam
  static PrefixScore dead() { return {neg_inf<S>(), neg_inf<S>()}; }
};

// Advance prefix g across frame t without extending it. last_content is g's
// final token, -1 when g is empty.
template <class S>
PrefixScore<S> prefix_stay(const PrefixScore<S>& prev, int last_content,
                           const Mat<S>& logq, int t) {
  PrefixScore<S> out;
  out.b = prev.total() + logq(t, kBlank);
  out.n = last_content >= 0 ? prev.n + logq(t, to_grid(last_content))
                            : neg_inf<S>();
  return out;
}

// Score of g+c after frame t. g_prev is g's score at t-1; gc_prev is the
// running score of g+c itself at t-1 (dead() when g+c was not in the beam).
template <class S>
PrefixScore<S> prefix_score_step(const PrefixScore<S>& g_prev,
                                 const PrefixScore<S>& gc_prev, int last_of_g,
                                 int c, const Mat<S>& logq, int t) {
  if (c < 0)
    throw ContractError("prefix extension must be a content token");
  if (to_grid(c) >= logq.cols())
    throw TargetError("content token " + std::to_string(c) + " outside grid of " +
                      std::to_string(logq.cols()) + " symbols");
  const S phi = last_of_g == c ? g_prev.b : g_prev.total();
  PrefixScore<S> out;
  out.n = log_add(gc_prev.n, phi) + logq(t, to_grid(c));
  out.b = gc_prev.total() + logq(t, kBlank);
  return out;
}

// Exact log p_ctc(y, t): mass of all length-t alignments whose collapse is y.
// t counts frames consumed, 0 <= t <= grid rows.
template <class S>
S prefix_logp_full(const Mat<S>& logq, const std::vector<int>& y_content, int t) {
  if (t < 0 || t > logq.rows())
    throw ContractError("frame count " + std::to_string(t) + " outside grid of " +
                        std::to_string(logq.rows()));
  const int L = static_cast<int>(y_content.size());
  std::vector<PrefixScore<S>> cur(L + 1, PrefixScore<S>::dead()), nxt(L + 1);
  cur[0] = PrefixScore<S>::initial();
  for (int f = 0; f < t; ++f) {
    nxt[0] = prefix_stay(cur[0], -1, logq, f);
    for (int l = 1; l <= L; ++l) {
      const int last_of_g = l >= 2 ? y_content[l - 2] : -1;
      nxt[l] = prefix_score_step(cur[l - 1], cur[l], last_of_g, y_content[l - 1],
                                 logq, f);
    }
    cur.swap(nxt);
  }
  return cur[L].total();
}

// ─── debug grid dumps ───────────────────────────────────────────────────────

template <class S>
void save_grid(const std::filesystem::path& dir, const PosteriorGrid<S>& grid) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create '" + dir.string() + "': " + ec.message());
  nlohmann::json manifest = {{"frames", grid.frames()}, {"symbols", grid.symbols()}};
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
  std::ofstream blob(dir / "grid.bin", std::ios::binary);
  MatF q = grid.q.template cast<float>();
  blob.write(reinterpret_cast<const char*>(q.data()),
             static_cast<std::streamsize>(q.size() * sizeof(float)));
}

template <class S>
PosteriorGrid<S> load_grid(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw DataError("'" + dir.string() + "' has no manifest.json");
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("grid manifest: ") + e.what());
  }
  int frames, symbols;
  try {
    frames = manifest.at("frames").get<int>();
    symbols = manifest.at("symbols").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("grid manifest: ") + e.what());
  }
  std::ifstream blob(dir / "grid.bin", std::ios::binary);
  blob.seekg(0, std::ios::end);
  const std::int64_t actual = blob.tellg();
  const std::int64_t expect = std::int64_t(frames) * symbols * sizeof(float);
  if (actual != expect)
    throw FormatError("grid.bin holds " + std::to_string(actual) +
                      " bytes, manifest implies " + std::to_string(expect));
  blob.seekg(0);
  MatF q(frames, symbols);
  blob.read(reinterpret_cast<char*>(q.data()), expect);
  return PosteriorGrid<S>::from_probs(q.template cast<S>());
}

}  // namespace pasr::ctc
