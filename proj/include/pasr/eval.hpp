#pragma once

// Token error rate over Levenshtein alignments with unit costs. Counts are
// aggregated corpus-wide before dividing, so long utterances weigh more.

#include "pasr/common.hpp"

#include <limits>
#include <vector>

namespace pasr {

struct ErrorRateReport {
  long long substitutions = 0;
  long long deletions = 0;
  long long insertions = 0;
  long long ref_len = 0;

  long long errors() const { return substitutions + deletions + insertions; }
  double rate() const {
    if (ref_len == 0)
      return errors() == 0 ? 0.0 : std::numeric_limits<double>::infinity();
    return static_cast<double>(errors()) / static_cast<double>(ref_len);
  }

  ErrorRateReport& operator+=(const ErrorRateReport& o) {
    substitutions += o.substitutions;
    deletions += o.deletions;
    insertions += o.insertions;
    ref_len += o.ref_len;
    return *this;
  }
};

// Alignment counts for one utterance. Cost ties are resolved preferring
// substitution, then insertion, then deletion, so counts are reproducible.
ErrorRateReport align_counts(const std::vector<int>& ref,
                             const std::vector<int>& hyp);

// Corpus-level report; refs and hyps are parallel lists.
ErrorRateReport error_rate(const std::vector<std::vector<int>>& refs,
                           const std::vector<std::vector<int>>& hyps);

}  // namespace pasr
