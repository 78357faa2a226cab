#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dialign/calibrate.hpp"

namespace dialign::dpo {

struct LogprobRecord {
    std::vector<double> policy_chosen;
    std::vector<double> ref_chosen;
    std::vector<double> policy_rejected;
    std::vector<double> ref_rejected;

    void check() const;
};

struct DpoConfig {
    double beta = 0.1;
    void check() const;
};

/// Compensated (Neumaier) sum of per-token log-probabilities.
double seq_logprob(std::span<const double> tokens);

struct DpoLoss {
    double loss = 0.0;
    double reward_chosen = 0.0;
    double reward_rejected = 0.0;
    double margin() const { return reward_chosen - reward_rejected; }
};

DpoLoss dpo_loss(const LogprobRecord& record, const DpoConfig& config);

/// Loss from already-summed sequence log-probabilities.
DpoLoss dpo_loss(double policy_chosen, double ref_chosen, double policy_rejected,
                 double ref_rejected, const DpoConfig& config);

struct DpoGrad {
    double d_policy_chosen = 0.0;
    double d_policy_rejected = 0.0;
};

DpoGrad dpo_grad(const LogprobRecord& record, const DpoConfig& config);

double implicit_accuracy(std::span<const LogprobRecord> records, const DpoConfig& config);

/// log(1 + e^x) without overflow.
double softplus(double x);

/// One line of a preference file.
struct PreferenceRecord {
    PairKind kind = PairKind::Rewrite;
    std::string prompt;
    std::string chosen;
    std::string rejected;
    double chosen_score = 0.0;
    double rejected_score = 0.0;
    int round = 0;
    nlohmann::json meta = nlohmann::json::object();

    bool operator==(const PreferenceRecord&) const = default;
};

/// Rewrite pairs are prompted with the rewrite template over the full
/// original conversation; response pairs with the response template.
PreferenceRecord to_record(const PreferencePair& pair, int round);

nlohmann::json to_json(const PreferenceRecord& record);
PreferenceRecord record_from_json(const nlohmann::json& json);

std::size_t export_preferences(std::span<const PreferencePair> pairs, int round,
                               const std::filesystem::path& path);
std::vector<PreferenceRecord> load_preferences(const std::filesystem::path& path);

}  // namespace dialign::dpo
