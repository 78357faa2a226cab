#pragma once

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dialign/corpus.hpp"
#include "dialign/errors.hpp"

namespace dialign {

inline constexpr double kDefaultTau = 0.9;

struct ScoredCandidate {
    DialogueContext context;
    std::string response;
    double coherence = 0.0;
    double quality = 0.0;
    double rewrite_score = 0.0;
};

struct CalibrationWeights {
    double f_c = 0.0;
    double f_r = 0.0;
    double alpha_c = 0.5;
    double alpha_r = 0.5;
    double tau = kDefaultTau;

    double combine(double coherence, double quality) const {
        return alpha_c * coherence + alpha_r * quality;
    }
};

/// Population standard deviation over mean; 0 when the mean is 0 or m = 1.
double cov(std::span<const double> values);

CalibrationWeights weights(double f_c, double f_r, double tau = kDefaultTau);

struct RewriteScores {
    std::vector<double> z;
    CalibrationWeights weights;
};

RewriteScores rewrite_scores(std::span<const double> coherences, std::span<const double> qualities,
                             double tau = kDefaultTau);

enum class PairKind { Rewrite, Response };
const char* to_string(PairKind kind);
PairKind parse_pair_kind(std::string_view name);

struct PreferencePair {
    PairKind kind = PairKind::Rewrite;
    DialogueContext original;
    std::string chosen;    // serialized context for rewrite pairs, response text otherwise
    std::string rejected;
    double chosen_score = 0.0;
    double rejected_score = 0.0;
    std::size_t chosen_index = 0;
    std::size_t rejected_index = 0;
    nlohmann::json meta = nlohmann::json::object();
};

/// Serialized form of a rewrite-pair item.
std::string serialize_item(const DialogueContext& context);
inline const std::string& serialize_item(const std::string& text) { return text; }

struct Selection {
    std::size_t chosen = 0;
    std::size_t rejected = 0;
};

/// argmax / argmin with ties toward the smallest index; nothing when every
/// score is equal.
std::optional<Selection> select_indices(std::span<const double> scores);

template <typename Item>
std::optional<PreferencePair> select_pairs(std::span<const Item> items,
                                           std::span<const double> scores,
                                           const DialogueContext& original, PairKind kind) {
    if (items.size() != scores.size()) throw DataError("select_pairs: items and scores differ in length");
    const auto pick = select_indices(scores);
    if (!pick) return std::nullopt;
    PreferencePair pair;
    pair.kind = kind;
    pair.original = original;
    pair.chosen = serialize_item(items[pick->chosen]);
    pair.rejected = serialize_item(items[pick->rejected]);
    if (pair.chosen == pair.rejected) return std::nullopt;
    pair.chosen_score = scores[pick->chosen];
    pair.rejected_score = scores[pick->rejected];
    pair.chosen_index = pick->chosen;
    pair.rejected_index = pick->rejected;
    return pair;
}

struct PreferenceSets {
    std::optional<PreferencePair> rewrite;   // ranked by z
    std::optional<PreferencePair> response;  // ranked by r
};

PreferenceSets build_preference_sets(const DialogueContext& original,
                                     std::span<const ScoredCandidate> candidates);

}  // namespace dialign
