#include "dialign/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>

#include "dialign/errors.hpp"

namespace dialign::metrics {

namespace {

using Ngram = std::vector<std::string>;

std::map<Ngram, int> ngram_counts(const TokenSeq& seq, int k) {
    std::map<Ngram, int> counts;
    const auto& tok = seq.tokens;
    if (static_cast<int>(tok.size()) < k) return counts;
    for (std::size_t i = 0; i + k <= tok.size(); ++i) {
        ++counts[Ngram(tok.begin() + i, tok.begin() + i + k)];
    }
    return counts;
}

std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

}  // namespace

TokenSeq tokenize(std::string_view text) {
    TokenSeq out;
    std::string current;
    auto flush = [&] {
        if (!current.empty()) out.tokens.push_back(std::move(current));
        current.clear();
    };
    for (const char raw : text) {
        const auto c = static_cast<unsigned char>(raw);
        if (std::isspace(c)) {
            flush();
        } else if (c < 0x80 && std::ispunct(c)) {
            flush();
            out.tokens.emplace_back(1, raw);
        } else {
            current.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
        }
    }
    flush();
    return out;
}

double bleu_n(const TokenSeq& candidate, const TokenSeq& reference, int n) {
    if (n < 1) throw std::invalid_argument("bleu_n: n must be >= 1");
    if (candidate.empty()) return 0.0;
    double log_sum = 0.0;
    for (int k = 1; k <= n; ++k) {
        const auto cand = ngram_counts(candidate, k);
        const auto ref = ngram_counts(reference, k);
        int matched = 0;
        int total = 0;
        for (const auto& [gram, count] : cand) {
            total += count;
            if (auto it = ref.find(gram); it != ref.end()) matched += std::min(count, it->second);
        }
        double precision = total > 0 ? static_cast<double>(matched) / total : 0.0;
        if (precision == 0.0) {
            if (k == 1) return 0.0;
            precision = kBleuSmoothing;
        }
        log_sum += std::log(precision);
    }
    const double c = static_cast<double>(candidate.size());
    const double r = static_cast<double>(reference.size());
    const double brevity = std::min(1.0, std::exp(1.0 - r / c));
    return std::clamp(brevity * std::exp(log_sum / n), 0.0, 1.0);
}

RougeScore rouge_l(const TokenSeq& candidate, const TokenSeq& reference) {
    RougeScore score;
    if (candidate.empty() || reference.empty()) return score;
    const double lcs = static_cast<double>(lcs_length(candidate.tokens, reference.tokens));
    score.precision = lcs / static_cast<double>(candidate.size());
    score.recall = lcs / static_cast<double>(reference.size());
    const double sum = score.precision + score.recall;
    score.f = sum > 0.0 ? 2.0 * score.precision * score.recall / sum : 0.0;
    return score;
}

double meteor_lite(const TokenSeq& candidate, const TokenSeq& reference) {
    const auto& cand = candidate.tokens;
    const auto& ref = reference.tokens;
    // Leftmost unused exact match for each candidate token, in order.
    std::vector<bool> used(ref.size(), false);
    std::vector<long> aligned(cand.size(), -1);
    int matches = 0;
    for (std::size_t i = 0; i < cand.size(); ++i) {
        for (std::size_t j = 0; j < ref.size(); ++j) {
            if (!used[j] && ref[j] == cand[i]) {
                used[j] = true;
                aligned[i] = static_cast<long>(j);
                ++matches;
                break;
            }
        }
    }
    if (matches == 0) return 0.0;
    int chunks = 0;
    long prev_cand = -2;
    long prev_ref = -2;
    for (std::size_t i = 0; i < cand.size(); ++i) {
        if (aligned[i] < 0) continue;
        const long ci = static_cast<long>(i);
        if (!(ci == prev_cand + 1 && aligned[i] == prev_ref + 1)) ++chunks;
        prev_cand = ci;
        prev_ref = aligned[i];
    }
    const double p = static_cast<double>(matches) / static_cast<double>(cand.size());
    const double r = static_cast<double>(matches) / static_cast<double>(ref.size());
    const double fmean = p * r / (0.9 * p + 0.1 * r);
    const double penalty = 0.5 * std::pow(static_cast<double>(chunks) / matches, 3.0);
    return fmean * (1.0 - penalty);
}

double dist_n(std::span<const TokenSeq> responses, int n) {
    if (n < 1) throw std::invalid_argument("dist_n: n must be >= 1");
    std::set<Ngram> distinct;
    std::size_t total = 0;
    for (const auto& response : responses) {
        for (const auto& [gram, count] : ngram_counts(response, n)) {
            distinct.insert(gram);
            total += static_cast<std::size_t>(count);
        }
    }
    return total == 0 ? 0.0 : static_cast<double>(distinct.size()) / static_cast<double>(total);
}

double response_quality(std::string_view candidate, std::string_view reference) {
    const TokenSeq ref = tokenize(reference);
    if (ref.empty()) throw DataError("response_quality: empty reference");
    const TokenSeq cand = tokenize(candidate);
    return 0.5 * (bleu_n(cand, ref, 1) + rouge_l(cand, ref).f);
}

}  // namespace dialign::metrics
