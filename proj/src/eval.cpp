#include "pasr/eval.hpp"

#include <algorithm>

namespace pasr {

ErrorRateReport align_counts(const std::vector<int>& ref,
                             const std::vector<int>& hyp) {
  const int n = static_cast<int>(ref.size());
  const int m = static_cast<int>(hyp.size());
  std::vector<std::vector<int>> d(n + 1, std::vector<int>(m + 1, 0));
  for (int i = 0; i <= n; ++i) d[i][0] = i;
  for (int j = 0; j <= m; ++j) d[0][j] = j;
  for (int i = 1; i <= n; ++i)
    for (int j = 1; j <= m; ++j) {
      if (ref[i - 1] == hyp[j - 1]) {
        d[i][j] = d[i - 1][j - 1];
      } else {
        d[i][j] = 1 + std::min({d[i - 1][j - 1], d[i][j - 1], d[i - 1][j]});
      }
    }

  ErrorRateReport rep;
  rep.ref_len = n;
  int i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && ref[i - 1] == hyp[j - 1] &&
        d[i][j] == d[i - 1][j - 1]) {
      --i;
      --j;
    } else if (i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + 1) {
      ++rep.substitutions;
      --i;
      --j;
    } else if (j > 0 && d[i][j] == d[i][j - 1] + 1) {
      ++rep.insertions;
      --j;
    } else {
      ++rep.deletions;
      --i;
    }
  }
  return rep;
}

ErrorRateReport error_rate(const std::vector<std::vector<int>>& refs,
                           const std::vector<std::vector<int>>& hyps) {
  if (refs.size() != hyps.size())
    throw ContractError("reference list has " + std::to_string(refs.size()) +
                        " entries, hypothesis list " +
                        std::to_string(hyps.size()));
  ErrorRateReport total;
  for (size_t k = 0; k < refs.size(); ++k) total += align_counts(refs[k], hyps[k]);
  return total;
}

}  // namespace pasr
