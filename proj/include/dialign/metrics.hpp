#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dialign::metrics {

/// Lowercased tokens; whitespace separates, ASCII punctuation stands alone.
struct TokenSeq {
    std::vector<std::string> tokens;

    std::size_t size() const { return tokens.size(); }
    bool empty() const { return tokens.empty(); }
    bool operator==(const TokenSeq&) const = default;
};

struct RougeScore {
    double precision = 0.0;
    double recall = 0.0;
    double f = 0.0;
};

/// Floor applied to zero higher-order n-gram precisions.
inline constexpr double kBleuSmoothing = 1e-9;

TokenSeq tokenize(std::string_view text);

/// Sentence-level BLEU over orders 1..n with brevity penalty. Orders >= 2 are
/// smoothed with kBleuSmoothing; order 1 is exact.
double bleu_n(const TokenSeq& candidate, const TokenSeq& reference, int n);

RougeScore rouge_l(const TokenSeq& candidate, const TokenSeq& reference);

/// Exact-match METEOR without stemming or synonyms.
double meteor_lite(const TokenSeq& candidate, const TokenSeq& reference);

double dist_n(std::span<const TokenSeq> responses, int n);

/// Mean of unigram BLEU and ROUGE-L F. Throws DataError on an empty reference.
double response_quality(std::string_view candidate, std::string_view reference);

}  // namespace dialign::metrics
