#include "dialign/dpo.hpp"

#include <cmath>
#include <fstream>

#include "dialign/errors.hpp"

namespace dialign::dpo {

namespace {

void check_side(const std::vector<double>& values, const char* name) {
    if (values.empty()) throw DataError(std::string("logprob record: ") + name + " is empty");
    for (double v : values) {
        if (!std::isfinite(v) || v > 0.0) {
            throw DataError(std::string("logprob record: ") + name + " holds a value that is not a finite log-probability");
        }
    }
}

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

void LogprobRecord::check() const {
    check_side(policy_chosen, "policy_chosen");
    check_side(ref_chosen, "ref_chosen");
    check_side(policy_rejected, "policy_rejected");
    check_side(ref_rejected, "ref_rejected");
}

void DpoConfig::check() const {
    if (!(beta > 0.0) || !std::isfinite(beta)) throw ConfigError("dpo: beta must be a positive real");
}

double seq_logprob(std::span<const double> tokens) {
    if (tokens.empty()) throw DataError("seq_logprob: empty token list");
    double sum = 0.0, comp = 0.0;
    for (double v : tokens) {
        if (!std::isfinite(v)) throw DataError("seq_logprob: non-finite token log-probability");
        const double t = sum + v;
        comp += std::abs(sum) >= std::abs(v) ? (sum - t) + v : (v - t) + sum;
        sum = t;
    }
    return sum + comp;
}

double softplus(double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

DpoLoss dpo_loss(double policy_chosen, double ref_chosen, double policy_rejected,
                 double ref_rejected, const DpoConfig& config) {
    config.check();
    DpoLoss out;
    out.reward_chosen = config.beta * (policy_chosen - ref_chosen);
    out.reward_rejected = config.beta * (policy_rejected - ref_rejected);
    out.loss = softplus(-out.margin());
    return out;
}

DpoLoss dpo_loss(const LogprobRecord& record, const DpoConfig& config) {
    record.check();
    return dpo_loss(seq_logprob(record.policy_chosen), seq_logprob(record.ref_chosen),
                    seq_logprob(record.policy_rejected), seq_logprob(record.ref_rejected), config);
}

DpoGrad dpo_grad(const LogprobRecord& record, const DpoConfig& config) {
    const double s = sigmoid(-dpo_loss(record, config).margin());
    return {-config.beta * s, config.beta * s};
}

double implicit_accuracy(std::span<const LogprobRecord> records, const DpoConfig& config) {
    if (records.empty()) throw DataError("implicit_accuracy: no records");
    std::size_t wins = 0;
    for (const auto& r : records) {
        const auto l = dpo_loss(r, config);
        if (l.reward_chosen > l.reward_rejected) ++wins;
    }
    return static_cast<double>(wins) / static_cast<double>(records.size());
}

PreferenceRecord to_record(const PreferencePair& pair, int round) {
    if (pair.chosen == pair.rejected) throw DataError("preference pair: chosen equals rejected");
    if (!(pair.chosen_score >= pair.rejected_score)) {
        throw DataError("preference pair: chosen_score below rejected_score");
    }
    PreferenceRecord rec;
    rec.kind = pair.kind;
    if (pair.kind == PairKind::Rewrite) {
        PromptExtras extras;
        std::vector<std::string> prefix;
        for (int i = 1; i < pair.original.size(); ++i) prefix.push_back(pair.original.turn(i).text);
        extras.rewritten_prefix = std::move(prefix);
        rec.prompt = render_prompt(pair.original, kRewriteUtterance, extras);
    } else {
        rec.prompt = render_prompt(pair.original, kGenerateResponse);
    }
    rec.chosen = pair.chosen;
    rec.rejected = pair.rejected;
    rec.chosen_score = pair.chosen_score;
    rec.rejected_score = pair.rejected_score;
    rec.round = round;
    rec.meta = pair.meta;
    return rec;
}

nlohmann::json to_json(const PreferenceRecord& record) {
    return {{"kind", to_string(record.kind)},       {"prompt", record.prompt},
            {"chosen", record.chosen},               {"rejected", record.rejected},
            {"chosen_score", record.chosen_score},   {"rejected_score", record.rejected_score},
            {"round", record.round},                 {"meta", record.meta}};
}

PreferenceRecord record_from_json(const nlohmann::json& json) {
    try {
        PreferenceRecord rec;
        rec.kind = parse_pair_kind(json.at("kind").get<std::string>());
        rec.prompt = json.at("prompt").get<std::string>();
        rec.chosen = json.at("chosen").get<std::string>();
        rec.rejected = json.at("rejected").get<std::string>();
        rec.chosen_score = json.at("chosen_score").get<double>();
        rec.rejected_score = json.at("rejected_score").get<double>();
        rec.round = json.at("round").get<int>();
        rec.meta = json.value("meta", nlohmann::json::object());
        return rec;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("preference record: ") + e.what());
    }
}

std::size_t export_preferences(std::span<const PreferencePair> pairs, int round,
                               const std::filesystem::path& path) {
    std::vector<std::string> lines;
    lines.reserve(pairs.size());
    for (const auto& pair : pairs) lines.push_back(to_json(to_record(pair, round)).dump());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write preferences '" + path.string() + "'");
    for (const auto& line : lines) out << line << '\n';
    out.flush();
    if (!out) throw DataError("I/O failure writing preferences '" + path.string() + "'");
    return lines.size();
}

std::vector<PreferenceRecord> load_preferences(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open preferences '" + path.string() + "'");
    std::vector<PreferenceRecord> out;
    std::size_t lineno = 0;
    for (std::string line; std::getline(in, line);) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(record_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::parse_error& e) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        } catch (const DataError& e) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace dialign::dpo
