#include "dialign/calibrate.hpp"

#include <cmath>

namespace dialign {

double cov(std::span<const double> values) {
    if (values.empty()) throw DataError("cov: empty list");
    const double m = static_cast<double>(values.size());
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= m;
    if (values.size() == 1 || mean == 0.0) return 0.0;
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    return std::sqrt(ss / m) / std::abs(mean);
}

CalibrationWeights weights(double f_c, double f_r, double tau) {
    if (!(tau > 0.0)) throw ConfigError("weights: tau must be positive");
    CalibrationWeights w;
    w.f_c = f_c;
    w.f_r = f_r;
    w.tau = tau;
    // Two-way softmax written as a logistic to stay finite for large f / tau.
    w.alpha_c = 1.0 / (1.0 + std::exp((f_r - f_c) / tau));
    w.alpha_r = 1.0 - w.alpha_c;
    return w;
}

RewriteScores rewrite_scores(std::span<const double> coherences, std::span<const double> qualities,
                             double tau) {
    if (coherences.size() != qualities.size()) {
        throw DataError("rewrite_scores: coherence and quality lists differ in length");
    }
    if (coherences.empty()) throw DataError("rewrite_scores: empty candidate batch");
    RewriteScores out;
    out.weights = weights(cov(coherences), cov(qualities), tau);
    out.z.reserve(coherences.size());
    for (std::size_t i = 0; i < coherences.size(); ++i) {
        out.z.push_back(out.weights.combine(coherences[i], qualities[i]));
    }
    return out;
}

const char* to_string(PairKind kind) { return kind == PairKind::Rewrite ? "rewrite" : "response"; }

PairKind parse_pair_kind(std::string_view name) {
    if (name == "rewrite") return PairKind::Rewrite;
    if (name == "response") return PairKind::Response;
    throw DataError("unknown preference kind '" + std::string(name) + "'");
}

std::string serialize_item(const DialogueContext& context) { return to_json(context).dump(); }

std::optional<Selection> select_indices(std::span<const double> scores) {
    if (scores.empty()) return std::nullopt;
    Selection s;
    for (std::size_t i = 1; i < scores.size(); ++i) {
        if (scores[i] > scores[s.chosen]) s.chosen = i;
        if (scores[i] < scores[s.rejected]) s.rejected = i;
    }
    if (!(scores[s.chosen] > scores[s.rejected])) return std::nullopt;
    return s;
}

PreferenceSets build_preference_sets(const DialogueContext& original,
                                     std::span<const ScoredCandidate> candidates) {
    if (candidates.empty()) throw DataError("build_preference_sets: no candidates");
    std::vector<DialogueContext> contexts;
    std::vector<std::string> responses;
    std::vector<double> z, r;
    for (const auto& c : candidates) {
        contexts.push_back(c.context);
        responses.push_back(c.response);
        z.push_back(c.rewrite_score);
        r.push_back(c.quality);
    }
    auto meta = [&](const PreferencePair& p) {
        const auto& w = candidates[p.chosen_index];
        const auto& l = candidates[p.rejected_index];
        return nlohmann::json{{"coherence_chosen", w.coherence},
                              {"quality_chosen", w.quality},
                              {"coherence_rejected", l.coherence},
                              {"quality_rejected", l.quality},
                              {"chosen_index", p.chosen_index},
                              {"rejected_index", p.rejected_index}};
    };
    PreferenceSets sets;
    sets.rewrite = select_pairs<DialogueContext>(contexts, z, original, PairKind::Rewrite);
    if (sets.rewrite) sets.rewrite->meta = meta(*sets.rewrite);
    sets.response = select_pairs<std::string>(responses, r, original, PairKind::Response);
    if (sets.response) sets.response->meta = meta(*sets.response);
    return sets;
}

}  // namespace dialign
