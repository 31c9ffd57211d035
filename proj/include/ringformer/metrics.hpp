#pragma once

// Corpus BLEU and token/sequence accuracy over decoded token lists.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "ringformer/errors.hpp"

namespace ringformer {

using TokenSeq = std::vector<int>;

namespace detail {

inline std::map<TokenSeq, std::size_t> ngram_counts(const TokenSeq& s, std::size_t n) {
  std::map<TokenSeq, std::size_t> out;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++out[TokenSeq(s.begin() + i, s.begin() + i + n)];
  return out;
}

inline void require_paired(std::size_t hyps, std::size_t refs, const char* what) {
  if (hyps != refs) {
    throw DimensionError(std::string(what) + ": " + std::to_string(hyps) + " hypotheses vs " + std::to_string(refs) +
                         " references");
  }
  if (hyps == 0) throw ConfigError(std::string(what) + ": empty corpus");
}

}  // namespace detail

/// Corpus BLEU: geometric mean of clipped n-gram precisions (n = 1..max_n)
/// times exp(min(0, 1 - ref_len / hyp_len)). Counts for n >= 2 get add-one
/// smoothing, (matches + 1) / (total + 1); unigram precision is unsmoothed.
inline double bleu(const std::vector<TokenSeq>& hyps, const std::vector<TokenSeq>& refs, std::size_t max_n = 4) {
  detail::require_paired(hyps.size(), refs.size(), "bleu");
  if (max_n == 0) throw ConfigError("bleu: max_n must be positive");
  std::vector<double> matches(max_n, 0.0), totals(max_n, 0.0);
  double hyp_len = 0, ref_len = 0;
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    hyp_len += static_cast<double>(hyps[s].size());
    ref_len += static_cast<double>(refs[s].size());
    for (std::size_t n = 1; n <= max_n; ++n) {
      const auto ref_counts = detail::ngram_counts(refs[s], n);
      for (const auto& [gram, count] : detail::ngram_counts(hyps[s], n)) {
        const auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) matches[n - 1] += static_cast<double>(std::min(count, it->second));
        totals[n - 1] += static_cast<double>(count);
      }
    }
  }
  if (hyp_len == 0 || matches[0] == 0) return 0.0;
  double log_sum = std::log(matches[0] / totals[0]);
  for (std::size_t n = 2; n <= max_n; ++n) log_sum += std::log((matches[n - 1] + 1.0) / (totals[n - 1] + 1.0));
  const double bp = std::exp(std::min(0.0, 1.0 - ref_len / hyp_len));
  return bp * std::exp(log_sum / static_cast<double>(max_n));
}

struct AccuracyCounts {
  std::size_t correct_tokens = 0;
  std::size_t total_tokens = 0;
  std::size_t correct_sequences = 0;
  std::size_t sequences = 0;

  double token_accuracy() const { return total_tokens ? double(correct_tokens) / double(total_tokens) : 0.0; }
  double sequence_accuracy() const { return sequences ? double(correct_sequences) / double(sequences) : 0.0; }
};

/// Position-wise comparison against the reference: every reference position
/// counts once, missing or wrong hypothesis tokens count as errors. A sequence
/// is correct only when hypothesis and reference are identical.
inline AccuracyCounts accuracy_counts(const std::vector<TokenSeq>& hyps, const std::vector<TokenSeq>& refs) {
  detail::require_paired(hyps.size(), refs.size(), "accuracy");
  AccuracyCounts c;
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    for (std::size_t t = 0; t < refs[s].size(); ++t) c.correct_tokens += t < hyps[s].size() && hyps[s][t] == refs[s][t];
    c.total_tokens += refs[s].size();
    c.correct_sequences += hyps[s] == refs[s];
    ++c.sequences;
  }
  return c;
}

}  // namespace ringformer
