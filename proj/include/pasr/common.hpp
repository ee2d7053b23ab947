#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace pasr {

// Dense row-major matrix, the single numeric container used across the
// engine. Vectors are 1xN rows.
template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using MatF = Mat<float>;
using MatD = Mat<double>;

using Rng = std::mt19937;

// --- error taxonomy -------------------------------------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// shape or dimension mismatch between operands
struct ShapeError : Error {
  using Error::Error;
};

// attention query row with every key masked out
struct MaskError : Error {
  using Error::Error;
};

// API misuse: wrong call order, non-scalar loss, blank extension, ...
struct ContractError : Error {
  using Error::Error;
};

// out-of-order block delivery to a stateful consumer
struct SequencingError : Error {
  using Error::Error;
};

// index outside the vocabulary / table range
struct TargetError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

// missing or unreadable input artifacts
struct DataError : Error {
  using Error::Error;
};

// malformed persisted data (carries a byte offset where known)
struct FormatError : Error {
  using Error::Error;
};

// CTC target longer than the frame budget allows
struct InfeasibleAlignmentError : Error {
  using Error::Error;
};

inline std::string shape_str(Eigen::Index r, Eigen::Index c) {
  return "[" + std::to_string(r) + "x" + std::to_string(c) + "]";
}

// --- numeric helpers ------------------------------------------------------

template <class S>
constexpr S neg_inf() {
  return -std::numeric_limits<S>::infinity();
}

template <class S>
inline S log_add(S a, S b) {
  if (a == neg_inf<S>()) return b;
  if (b == neg_inf<S>()) return a;
  if (a < b) std::swap(a, b);
  return a + std::log1p(std::exp(b - a));
}

template <class S>
inline S log_sum(const S* v, int n) {
  S m = neg_inf<S>();
  for (int i = 0; i < n; ++i) m = std::max(m, v[i]);
  if (m == neg_inf<S>()) return m;
  S s = 0;
  for (int i = 0; i < n; ++i) s += std::exp(v[i] - m);
  return m + std::log(s);
}

// In-place log-softmax of one row.
template <class S>
inline void log_softmax_row(Eigen::Ref<Mat<S>> row) {
  S m = row.maxCoeff();
  S z = std::log((row.array() - m).exp().sum());
  row.array() -= m + z;
}

template <class S>
inline Mat<S> random_normal(int rows, int cols, Rng& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Mat<S> m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = static_cast<S>(dist(rng));
  return m;
}

}  // namespace pasr
