#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
// A Tape records executed operations in topological order; backward()
// replays the record once in reverse. Ops are free functions returning
// Var handles so expressions compose naturally.

#include "pasr/common.hpp"

#include <functional>
#include <memory>
#include <unordered_map>
#include <utility>

namespace pasr::ad {

template <class S>
class Tape;

// Named trainable matrix. Gradients accumulate here across backward passes
// until zero_grad().
template <class S>
struct Parameter {
  std::string name;
  Mat<S> value;
  Mat<S> grad;

  Parameter() = default;
  Parameter(std::string n, Mat<S> v)
      : name(std::move(n)), value(std::move(v)),
        grad(Mat<S>::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(); }
};

// Handle to one node on a tape.
template <class S>
struct Var {
  Tape<S>* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Mat<S>& value() const;
  int rows() const { return static_cast<int>(value().rows()); }
  int cols() const { return static_cast<int>(value().cols()); }
};

enum class ConvPadding { kCausal, kCentered };

template <class S>
class Tape {
 public:
  // gout is the upstream gradient of the node; implementations push
  // contributions into parents via Tape::accumulate.
  using BackwardFn = std::function<void(const Mat<S>& gout, Tape<S>& tape)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  int size() const { return static_cast<int>(nodes_.size()); }

  Var<S> constant(Mat<S> v) { return emit(std::move(v), false, nullptr); }

  Var<S> input(Mat<S> v, bool requires_grad) {
    return emit(std::move(v), requires_grad && grad_enabled_, nullptr);
  }

  // Leaf tied to a parameter; repeated use of one parameter on the same
  // tape shares a node so gradients sum naturally.
  Var<S> use(Parameter<S>& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Var<S>{this, it->second};
    Var<S> v = emit(p.value, grad_enabled_, nullptr);
    nodes_[v.id].param = &p;
    param_nodes_.emplace(&p, v.id);
    return v;
  }

  // Appends one node. requires_grad is forced off when grads are disabled.
  Var<S> emit(Mat<S> value, bool requires_grad, BackwardFn backward) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad && grad_enabled_;
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var<S>{this, static_cast<int>(nodes_.size()) - 1};
  }

  const Mat<S>& val(int id) const { return nodes_.at(id).value; }
  bool requires_grad(int id) const { return nodes_.at(id).requires_grad; }

  void accumulate(int id, const Mat<S>& g) {
    Node& n = nodes_.at(id);
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) n.grad = Mat<S>::Zero(n.value.rows(), n.value.cols());
    if (g.rows() != n.grad.rows() || g.cols() != n.grad.cols())
      throw ShapeError("gradient shape " + shape_str(g.rows(), g.cols()) +
                       " does not match value " +
                       shape_str(n.grad.rows(), n.grad.cols()));
    n.grad += g;
  }

  // Reverse sweep from a scalar loss. Each recorded node is visited exactly
  // once; parameter leaves flush into Parameter::grad.
  void backward(const Var<S>& loss) {
    if (loss.tape != this) throw ContractError("backward: loss from another tape");
    const Mat<S>& lv = val(loss.id);
    if (lv.rows() != 1 || lv.cols() != 1)
      throw ContractError("backward: loss must be scalar, got " +
                          shape_str(lv.rows(), lv.cols()));
    if (!nodes_.at(loss.id).requires_grad)
      throw ContractError("backward: loss does not require grad");
    accumulate(loss.id, Mat<S>::Ones(1, 1));
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      if (n.backward) n.backward(n.grad, *this);
      if (n.param) n.param->grad += n.grad;
    }
  }

  // Gradient of a leaf/input after backward; zero matrix if none reached it.
  Mat<S> grad(const Var<S>& v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.size() == 0) return Mat<S>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

 private:
  struct Node {
    Mat<S> value;
    Mat<S> grad;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter<S>* param = nullptr;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<S>*, int> param_nodes_;
  bool grad_enabled_;
};

template <class S>
const Mat<S>& Var<S>::value() const {
  return tape->val(id);
}

namespace detail {

template <class S>
inline Tape<S>& same_tape(const Var<S>& a, const Var<S>& b) {
  if (a.tape == nullptr || a.tape != b.tape)
    throw ContractError("operands live on different tapes");
  return *a.tape;
}

}  // namespace detail

// --- elementwise / structural ops ------------------------------------------

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  Tape<S>& t = detail::same_tape(a, b);
  const Mat<S>&av = a.value(), &bv = b.value();
  if (av.rows() != bv.rows() || av.cols() != bv.cols())
    throw ShapeError("add: " + shape_str(av.rows(), av.cols()) + " vs " +
                     shape_str(bv.rows(), bv.cols()));
  bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
  int ai = a.id, bi = b.id;
  return t.emit(av + bv, rg, [ai, bi](const Mat<S>& g, Tape<S>& tp) {
    tp.accumulate(ai, g);
    tp.accumulate(bi, g);
  });
}

template <class S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  Tape<S>& t = detail::same_tape(a, b);
  const Mat<S>&av = a.value(), &bv = b.value();
  if (av.rows() != bv.rows() || av.cols() != bv.cols())
    throw ShapeError("sub: " + shape_str(av.rows(), av.cols()) + " vs " +
                     shape_str(bv.rows(), bv.cols()));
  bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
  int ai = a.id, bi = b.id;
  return t.emit(av - bv, rg, [ai, bi](const Mat<S>& g, Tape<S>& tp) {
    tp.accumulate(ai, g);
    tp.accumulate(bi, Mat<S>(-g));
  });
}

template <class S>
Var<S> hadamard(const Var<S>& a, const Var<S>& b) {
  Tape<S>& t = detail::same_tape(a, b);
  const Mat<S>&av = a.value(), &bv = b.value();
  if (av.rows() != bv.rows() || av.cols() != bv.cols())
    throw ShapeError("hadamard: " + shape_str(av.rows(), av.cols()) + " vs " +
                     shape_str(bv.rows(), bv.cols()));
  bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
  int ai = a.id, bi = b.id;
  return t.emit(av.cwiseProduct(bv), rg, [ai, bi](const Mat<S>& g, Tape<S>& tp) {
    tp.accumulate(ai, Mat<S>(g.cwiseProduct(tp.val(bi))));
    tp.accumulate(bi, Mat<S>(g.cwiseProduct(tp.val(ai))));
  });
}

template <class S>
Var<S> scale(const Var<S>& a, S k) {
  Tape<S>& t = *a.tape;
  int ai = a.id;
  return t.emit(Mat<S>(a.value() * k), t.requires_grad(ai),
                [ai, k](const Mat<S>& g, Tape<S>& tp) {
                  tp.accumulate(ai, Mat<S>(g * k));
                });
}

template <class S>
Var<S> relu(const Var<S>& a) {
  Tape<S>& t = *a.tape;
  int ai = a.id;
  return t.emit(Mat<S>(a.value().cwiseMax(S(0))), t.requires_grad(ai),
                [ai](const Mat<S>& g, Tape<S>& tp) {
                  const Mat<S>& x = tp.val(ai);
                  Mat<S> gx =
                      ((x.array() > S(0)).template cast<S>() * g.array()).matrix();
                  tp.accumulate(ai, gx);
                });
}

template <class S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  Tape<S>& t = detail::same_tape(a, b);
  const Mat<S>&av = a.value(), &bv = b.value();
  if (av.cols() != bv.rows())
    throw ShapeError("matmul: inner extents disagree, " +
                     shape_str(av.rows(), av.cols()) + " x " +
                     shape_str(bv.rows(), bv.cols()));
  bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
  int ai = a.id, bi = b.id;
  return t.emit(av * bv, rg, [ai, bi](const Mat<S>& g, Tape<S>& tp) {
    tp.accumulate(ai, Mat<S>(g * tp.val(bi).transpose()));
    tp.accumulate(bi, Mat<S>(tp.val(ai).transpose() * g));
  });
}

// a * b^T; used for weight-tied output projections.
template <class S>
Var<S> matmul_nt(const Var<S>& a, const Var<S>& b) {
  Tape<S>& t = detail::same_tape(a, b);
  const Mat<S>&av = a.value(), &bv = b.value();
  if (av.cols() != bv.cols())
    throw ShapeError("matmul_nt: inner extents disagree, " +
                     shape_str(av.rows(), av.cols()) + " x " +
                     shape_str(bv.cols(), bv.rows()));
  bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
  int ai = a.id, bi = b.id;
  return t.emit(av * bv.transpose(), rg, [ai, bi](const Mat<S>& g, Tape<S>& tp) {
    tp.accumulate(ai, Mat<S>(g * tp.val(bi)));
    tp.accumulate(bi, Mat<S>(g.transpose() * tp.val(ai)));
  });
}

// x + b with b a 1xC row added to every row of x: the single broadcast the
// engine supports.
template <class S>
Var<S> add_row_bias(const Var<S>& x, const Var<S>& b) {
  Tape<S>& t = detail::same_tape(x, b);
  const Mat<S>&xv = x.value(), &bv = b.value();
  if (bv.rows() != 1 || bv.cols() != xv.cols())
    throw ShapeError("add_row_bias: bias " + shape_str(bv.rows(), bv.cols()) +
                     " incompatible with " + shape_str(xv.rows(), xv.cols()));
  bool rg = t.requires_grad(x.id) || t.requires_grad(b.id);
  int xi = x.id, bi = b.id;
  Mat<S> out = xv;
  out.rowwise() += bv.row(0);
  return t.emit(std::move(out), rg, [xi, bi](const Mat<S>& g, Tape<S>& tp) {
    tp.accumulate(xi, g);
    tp.accumulate(bi, Mat<S>(g.colwise().sum()));
  });
}

template <class S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no parts");
  Tape<S>& t = *parts[0].tape;
  int cols = parts[0].cols();
  int rows = 0;
  bool rg = false;
  for (const auto& p : parts) {
    detail::same_tape(parts[0], p);
    if (p.cols() != cols)
      throw ShapeError("concat_rows: column mismatch " + shape_str(p.rows(), p.cols()));
    rows += p.rows();
    rg = rg || t.requires_grad(p.id);
  }
  Mat<S> out(rows, cols);
  int r = 0;
  std::vector<std::pair<int, int>> spans;  // (id, rows)
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    spans.emplace_back(p.id, p.rows());
    r += p.rows();
  }
  return t.emit(std::move(out), rg, [spans](const Mat<S>& g, Tape<S>& tp) {
    int at = 0;
    for (auto [id, n] : spans) {
      tp.accumulate(id, Mat<S>(g.middleRows(at, n)));
      at += n;
    }
  });
}

template <class S>
Var<S> slice_rows(const Var<S>& x, int begin, int count) {
  Tape<S>& t = *x.tape;
  const Mat<S>& xv = x.value();
  if (begin < 0 || count < 0 || begin + count > xv.rows())
    throw ShapeError("slice_rows: [" + std::to_string(begin) + "," +
                     std::to_string(begin + count) + ") outside " +
                     shape_str(xv.rows(), xv.cols()));
  int xi = x.id;
  Eigen::Index total = xv.rows();
  return t.emit(Mat<S>(xv.middleRows(begin, count)), t.requires_grad(xi),
                [xi, begin, count, total](const Mat<S>& g, Tape<S>& tp) {
                  Mat<S> gx = Mat<S>::Zero(total, g.cols());
                  gx.middleRows(begin, count) = g;
                  tp.accumulate(xi, gx);
                });
}

template <class S>
Var<S> mean_rows(const Var<S>& x) {
  Tape<S>& t = *x.tape;
  const Mat<S>& xv = x.value();
  if (xv.rows() == 0) throw ContractError("mean_rows: empty input");
  int xi = x.id;
  int n = static_cast<int>(xv.rows());
  return t.emit(Mat<S>(xv.colwise().mean()), t.requires_grad(xi),
                [xi, n](const Mat<S>& g, Tape<S>& tp) {
                  Mat<S> gx = (Mat<S>::Ones(n, 1) * g) / S(n);
                  tp.accumulate(xi, gx);
                });
}

template <class S>
Var<S> sum_all(const Var<S>& x) {
  Tape<S>& t = *x.tape;
  int xi = x.id;
  Eigen::Index r = x.value().rows(), c = x.value().cols();
  Mat<S> out(1, 1);
  out(0, 0) = x.value().sum();
  return t.emit(std::move(out), t.requires_grad(xi),
                [xi, r, c](const Mat<S>& g, Tape<S>& tp) {
                  tp.accumulate(xi, Mat<S>(Mat<S>::Constant(r, c, g(0, 0))));
                });
}

// --- neural layers ----------------------------------------------------------

// Row-wise normalization with learned affine terms (gamma, beta are 1xC).
template <class S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta,
                  S eps = S(1e-5)) {
  Tape<S>& t = detail::same_tape(x, gamma);
  detail::same_tape(x, beta);
  const Mat<S>&xv = x.value(), &gv = gamma.value(), &bv = beta.value();
  if (gv.rows() != 1 || gv.cols() != xv.cols() || bv.rows() != 1 ||
      bv.cols() != xv.cols())
    throw ShapeError("layer_norm: affine terms must be 1x" +
                     std::to_string(xv.cols()));
  const int R = static_cast<int>(xv.rows()), C = static_cast<int>(xv.cols());
  auto xhat = std::make_shared<Mat<S>>(R, C);
  auto inv_sigma = std::make_shared<Mat<S>>(R, 1);
  Mat<S> out(R, C);
  for (int i = 0; i < R; ++i) {
    S mu = xv.row(i).mean();
    Mat<S> cent = (xv.row(i).array() - mu).matrix();
    S var = cent.array().square().mean();
    S is = S(1) / std::sqrt(var + eps);
    (*inv_sigma)(i, 0) = is;
    xhat->row(i) = cent * is;
    out.row(i) = (xhat->row(i).cwiseProduct(gv.row(0))) + bv.row(0);
  }
  bool rg = t.requires_grad(x.id) || t.requires_grad(gamma.id) ||
            t.requires_grad(beta.id);
  int xi = x.id, gi = gamma.id, bi = beta.id;
  return t.emit(std::move(out), rg,
                [xi, gi, bi, xhat, inv_sigma](const Mat<S>& g, Tape<S>& tp) {
                  const Mat<S>& gv2 = tp.val(gi);
                  const int R2 = static_cast<int>(g.rows());
                  const int C2 = static_cast<int>(g.cols());
                  Mat<S> gx(R2, C2);
                  for (int i = 0; i < R2; ++i) {
                    Mat<S> gxhat = g.row(i).cwiseProduct(gv2.row(0));
                    S m1 = gxhat.mean();
                    S m2 = gxhat.cwiseProduct(xhat->row(i)).mean();
                    gx.row(i) = (((gxhat.array() - m1) -
                                  xhat->row(i).array() * m2) *
                                 (*inv_sigma)(i, 0))
                                    .matrix();
                  }
                  tp.accumulate(xi, gx);
                  tp.accumulate(gi, Mat<S>(g.cwiseProduct(*xhat).colwise().sum()));
                  tp.accumulate(bi, Mat<S>(g.colwise().sum()));
                });
}

// Multi-head scaled dot-product attention. mask(i, j) == true means query
// row i may attend key row j; a query row with no admissible key is an
// error. Masked positions receive exactly zero weight.
template <class S>
Var<S> masked_attention(const Var<S>& q, const Var<S>& k, const Var<S>& v,
                        const Mask& mask, int heads) {
  Tape<S>& t = detail::same_tape(q, k);
  detail::same_tape(q, v);
  const Mat<S>&qv = q.value(), &kv = k.value(), &vv = v.value();
  const int Tq = static_cast<int>(qv.rows()), Tk = static_cast<int>(kv.rows());
  const int D = static_cast<int>(qv.cols());
  if (kv.cols() != D || vv.cols() != D || vv.rows() != Tk)
    throw ShapeError("masked_attention: q " + shape_str(Tq, D) + ", k " +
                     shape_str(kv.rows(), kv.cols()) + ", v " +
                     shape_str(vv.rows(), vv.cols()));
  if (heads <= 0 || D % heads != 0)
    throw ShapeError("masked_attention: dim " + std::to_string(D) +
                     " not divisible by " + std::to_string(heads) + " heads");
  if (mask.rows() != Tq || mask.cols() != Tk)
    throw ShapeError("masked_attention: mask " + shape_str(mask.rows(), mask.cols()) +
                     ", expected " + shape_str(Tq, Tk));
  for (int i = 0; i < Tq; ++i)
    if (!mask.row(i).any())
      throw MaskError("masked_attention: query row " + std::to_string(i) +
                      " has every key masked");

  const int dh = D / heads;
  const S inv_sqrt = S(1) / std::sqrt(S(dh));
  auto attn = std::make_shared<std::vector<Mat<S>>>();
  attn->reserve(heads);
  Mat<S> out(Tq, D);
  for (int h = 0; h < heads; ++h) {
    auto Qh = qv.middleCols(h * dh, dh);
    auto Kh = kv.middleCols(h * dh, dh);
    auto Vh = vv.middleCols(h * dh, dh);
    Mat<S> scores = (Qh * Kh.transpose()) * inv_sqrt;
    Mat<S> A(Tq, Tk);
    for (int i = 0; i < Tq; ++i) {
      S m = neg_inf<S>();
      for (int j = 0; j < Tk; ++j)
        if (mask(i, j)) m = std::max(m, scores(i, j));
      S z = 0;
      for (int j = 0; j < Tk; ++j)
        z += mask(i, j) ? std::exp(scores(i, j) - m) : S(0);
      for (int j = 0; j < Tk; ++j)
        A(i, j) = mask(i, j) ? std::exp(scores(i, j) - m) / z : S(0);
    }
    out.middleCols(h * dh, dh) = A * Vh;
    attn->push_back(std::move(A));
  }
  bool rg = t.requires_grad(q.id) || t.requires_grad(k.id) || t.requires_grad(v.id);
  int qi = q.id, ki = k.id, vi = v.id;
  return t.emit(std::move(out), rg,
                [qi, ki, vi, attn, heads, dh, inv_sqrt](const Mat<S>& g, Tape<S>& tp) {
                  const Mat<S>&qv2 = tp.val(qi), &kv2 = tp.val(ki), &vv2 = tp.val(vi);
                  Mat<S> gq = Mat<S>::Zero(qv2.rows(), qv2.cols());
                  Mat<S> gk = Mat<S>::Zero(kv2.rows(), kv2.cols());
                  Mat<S> gv = Mat<S>::Zero(vv2.rows(), vv2.cols());
                  for (int h = 0; h < heads; ++h) {
                    const Mat<S>& A = (*attn)[h];
                    auto Qh = qv2.middleCols(h * dh, dh);
                    auto Kh = kv2.middleCols(h * dh, dh);
                    auto Vh = vv2.middleCols(h * dh, dh);
                    auto Gh = g.middleCols(h * dh, dh);
                    gv.middleCols(h * dh, dh) = A.transpose() * Gh;
                    Mat<S> gA = Gh * Vh.transpose();
                    // softmax backward per row; masked entries have A == 0
                    Mat<S> gS(A.rows(), A.cols());
                    for (int i = 0; i < A.rows(); ++i) {
                      S dot = gA.row(i).cwiseProduct(A.row(i)).sum();
                      gS.row(i) = A.row(i).cwiseProduct(
                          (gA.row(i).array() - dot).matrix());
                    }
                    gq.middleCols(h * dh, dh) = (gS * Kh) * inv_sqrt;
                    gk.middleCols(h * dh, dh) = (gS.transpose() * Qh) * inv_sqrt;
                  }
                  tp.accumulate(qi, gq);
                  tp.accumulate(ki, gk);
                  tp.accumulate(vi, gv);
                });
}

// Per-channel 1-D convolution along the row (time) axis. kernel is KxC, one
// column per channel. kCausal pads K-1 zeros on the left; kCentered pads
// (K-1)/2 on both sides (K odd).
template <class S>
Var<S> depthwise_conv1d(const Var<S>& x, const Var<S>& kernel,
                        ConvPadding padding) {
  Tape<S>& t = detail::same_tape(x, kernel);
  const Mat<S>&xv = x.value(), &kv = kernel.value();
  const int T = static_cast<int>(xv.rows()), C = static_cast<int>(xv.cols());
  const int K = static_cast<int>(kv.rows());
  if (T == 0) throw ContractError("depthwise_conv1d: empty input");
  if (kv.cols() != C)
    throw ShapeError("depthwise_conv1d: kernel " + shape_str(K, kv.cols()) +
                     " vs input " + shape_str(T, C));
  if (padding == ConvPadding::kCentered && K % 2 == 0)
    throw ContractError("depthwise_conv1d: centered padding needs odd kernel");
  const int off = padding == ConvPadding::kCausal ? K - 1 : (K - 1) / 2;
  Mat<S> out = Mat<S>::Zero(T, C);
  for (int ti = 0; ti < T; ++ti)
    for (int j = 0; j < K; ++j) {
      int src = ti + j - off;
      if (src < 0 || src >= T) continue;
      out.row(ti) += kv.row(j).cwiseProduct(xv.row(src));
    }
  bool rg = t.requires_grad(x.id) || t.requires_grad(kernel.id);
  int xi = x.id, ki = kernel.id;
  return t.emit(std::move(out), rg,
                [xi, ki, K, off](const Mat<S>& g, Tape<S>& tp) {
                  const Mat<S>&xv2 = tp.val(xi), &kv2 = tp.val(ki);
                  const int T2 = static_cast<int>(xv2.rows());
                  Mat<S> gx = Mat<S>::Zero(T2, xv2.cols());
                  Mat<S> gk = Mat<S>::Zero(K, kv2.cols());
                  for (int ti = 0; ti < T2; ++ti)
                    for (int j = 0; j < K; ++j) {
                      int src = ti + j - off;
                      if (src < 0 || src >= T2) continue;
                      gx.row(src) += kv2.row(j).cwiseProduct(g.row(ti));
                      gk.row(j) += xv2.row(src).cwiseProduct(g.row(ti));
                    }
                  tp.accumulate(xi, gx);
                  tp.accumulate(ki, gk);
                });
}

// Gathers table rows by index; backward scatter-adds.
template <class S>
Var<S> embedding_lookup(const Var<S>& table, const std::vector<int>& ids) {
  Tape<S>& t = *table.tape;
  const Mat<S>& tv = table.value();
  for (int id : ids)
    if (id < 0 || id >= tv.rows())
      throw TargetError("embedding_lookup: index " + std::to_string(id) +
                        " outside table of " + std::to_string(tv.rows()));
  Mat<S> out(static_cast<int>(ids.size()), tv.cols());
  for (size_t i = 0; i < ids.size(); ++i) out.row(i) = tv.row(ids[i]);
  int ti = table.id;
  auto idx = std::make_shared<std::vector<int>>(ids);
  return t.emit(std::move(out), t.requires_grad(ti),
                [ti, idx](const Mat<S>& g, Tape<S>& tp) {
                  const Mat<S>& tv2 = tp.val(ti);
                  Mat<S> gt = Mat<S>::Zero(tv2.rows(), tv2.cols());
                  for (size_t i = 0; i < idx->size(); ++i)
                    gt.row((*idx)[i]) += g.row(i);
                  tp.accumulate(ti, gt);
                });
}

template <class S>
Var<S> log_softmax_rows(const Var<S>& x) {
  Tape<S>& t = *x.tape;
  Mat<S> out = x.value();
  for (int i = 0; i < out.rows(); ++i) log_softmax_row<S>(out.row(i));
  int xi = x.id;
  auto logp = std::make_shared<Mat<S>>(out);
  return t.emit(std::move(out), t.requires_grad(xi),
                [xi, logp](const Mat<S>& g, Tape<S>& tp) {
                  Mat<S> gx(g.rows(), g.cols());
                  for (int i = 0; i < g.rows(); ++i) {
                    S s = g.row(i).sum();
                    gx.row(i) = g.row(i) - (logp->row(i).array().exp() * s).matrix();
                  }
                  tp.accumulate(xi, gx);
                });
}

// Mean negative log-likelihood of integer targets under row-wise softmax.
template <class S>
Var<S> softmax_cross_entropy(const Var<S>& logits, const std::vector<int>& targets) {
  Tape<S>& t = *logits.tape;
  const Mat<S>& lv = logits.value();
  if (static_cast<int>(targets.size()) != lv.rows())
    throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(lv.rows()) + " rows");
  if (targets.empty()) throw ContractError("softmax_cross_entropy: no targets");
  for (int y : targets)
    if (y < 0 || y >= lv.cols())
      throw TargetError("softmax_cross_entropy: target " + std::to_string(y) +
                        " outside vocabulary of " + std::to_string(lv.cols()));
  Mat<S> logp = lv;
  for (int i = 0; i < logp.rows(); ++i) log_softmax_row<S>(logp.row(i));
  S nll = 0;
  for (size_t i = 0; i < targets.size(); ++i)
    nll -= logp(static_cast<int>(i), targets[i]);
  nll /= S(targets.size());
  Mat<S> out(1, 1);
  out(0, 0) = nll;
  int li = logits.id;
  auto saved = std::make_shared<Mat<S>>(std::move(logp));
  auto tgt = std::make_shared<std::vector<int>>(targets);
  return t.emit(std::move(out), t.requires_grad(li),
                [li, saved, tgt](const Mat<S>& g, Tape<S>& tp) {
                  const S go = g(0, 0) / S(tgt->size());
                  Mat<S> gl = saved->array().exp().matrix();
                  for (size_t i = 0; i < tgt->size(); ++i)
                    gl(static_cast<int>(i), (*tgt)[i]) -= S(1);
                  tp.accumulate(li, Mat<S>(gl * go));
                });
}

// --- composites -------------------------------------------------------------

template <class S>
Var<S> linear(const Var<S>& x, const Var<S>& w, const Var<S>& b) {
  return add_row_bias(matmul(x, w), b);
}

template <class S>
Var<S> feed_forward(const Var<S>& x, const Var<S>& w1, const Var<S>& b1,
                    const Var<S>& w2, const Var<S>& b2) {
  return linear(relu(linear(x, w1, b1)), w2, b2);
}

}  // namespace pasr::ad
