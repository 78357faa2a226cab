#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dialign/arhead.hpp"
#include "dialign/backends.hpp"
#include "dialign/calibrate.hpp"
#include "dialign/dpo.hpp"
#include "dialign/sampler.hpp"

namespace dialign {

struct EvolveConfig {
    int rounds = 5;
    int candidates = 4;  // m; also the sampler's path cap
    double phi = 0.4;
    double tau = kDefaultTau;
    SamplerConfig sampler;
    dpo::DpoConfig dpo;
    GenerationParams response{0.7, 256, {}, std::nullopt};
    std::uint64_t seed = 0;
    int parallelism = 4;
    nlohmann::json trainer_params = {{"lora_rank", 8}, {"lora_alpha", 32}, {"epochs", 2}};

    void check() const;
    SamplerConfig sampler_for(int round, std::size_t context_index) const;
};

struct RoundFiles {
    std::filesystem::path rewrite;   // D_h, relative to the run directory
    std::filesystem::path response;  // D_r
    std::string rewrite_sha256;
    std::string response_sha256;
    std::size_t rewrite_pairs = 0;
    std::size_t response_pairs = 0;

    bool operator==(const RoundFiles&) const = default;
};

struct EvolutionState {
    int k = 0;
    std::vector<DialogueContext> working_contexts;
    std::string rewriter_model_id;
    std::string responder_model_id;
    std::vector<RoundFiles> dataset_paths;
    std::uint64_t rng_seed = 0;
    int replacement_count = 0;
    std::string fingerprint;  // digest of the inputs that define the run

    bool operator==(const EvolutionState&) const = default;
};

/// Everything run_round needs besides the state.
struct BackendBundle {
    GeneratorFactory& generators;
    Embedder& embedder;
    SimilarityScorer& similarity;
    const ar::ARModeld& arhead;
    std::function<void(const std::string&)> notice = [](const std::string&) {};
};

struct CandidateScores {
    std::vector<ScoredCandidate> candidates;
    CalibrationWeights weights;
    double z0 = 0.0;
    double coherence0 = 0.0;
    double quality0 = 0.0;
};

/// One response per candidate and one for the original; weights come from
/// the candidates only and are reused for z0.
CandidateScores score_candidates(const DialogueContext& original,
                                 std::span<const DialogueContext> rewritten,
                                 TextGenerator& responder, const ar::ARModeld& arhead,
                                 Embedder& embedder, double tau,
                                 const GenerationParams& response_params = {0.7, 256, {}, std::nullopt});

struct Replacement {
    DialogueContext context;
    bool replaced = false;
    std::size_t index = 0;  // argmax candidate when replaced
};

Replacement maybe_replace(const DialogueContext& original,
                          std::span<const ScoredCandidate> candidates, double z0);

/// Per-context record of one round, kept for audit and tests.
struct ContextOutcome {
    CandidateScores scores;
    PreferenceSets pairs;
    bool replaced = false;
};

struct RoundReport {
    std::vector<ContextOutcome> outcomes;
};

/// Executes round state.k + 1. Files land in run_dir/round-<k>/. When
/// run_dir holds a checkpoint, the pending phase is recorded before the
/// trainer calls; any failure restores the pre-round checkpoint.
EvolutionState run_round(const EvolutionState& state, BackendBundle& backends,
                         TrainerHook& trainer, const EvolveConfig& config,
                         const std::filesystem::path& run_dir, RoundReport* report = nullptr);

/// Initial state: the dataset's contexts with the given starting model ids.
EvolutionState initial_state(const Dataset& dataset, std::string rewriter_model_id,
                             std::string responder_model_id, std::uint64_t seed);

/// Runs (or resumes) rounds until k = T, checkpointing after each one.
EvolutionState run(const Dataset& dataset, BackendBundle& backends, TrainerHook& trainer,
                   const EvolveConfig& config, const std::filesystem::path& run_dir,
                   const std::string& rewriter_model_id, const std::string& responder_model_id);

struct WarmupResult {
    std::string rewriter_model_id;
    std::string responder_model_id;
    RoundFiles files;
};

/// Round 0: teacher-sampled candidates, pairs exported and trained once.
/// Contexts are not replaced and the teacher is never updated.
WarmupResult warm_up(const Dataset& dataset, TextGenerator& teacher, BackendBundle& backends,
                     TrainerHook& trainer, const EvolveConfig& config,
                     const std::filesystem::path& out_dir, const std::string& rewriter_model_id,
                     const std::string& responder_model_id);

inline constexpr const char* kCheckpointName = "checkpoint.json";

nlohmann::json checkpoint_json(const EvolutionState& state,
                               const std::optional<nlohmann::json>& pending = std::nullopt);
EvolutionState state_from_json(const nlohmann::json& json);
void write_checkpoint(const std::filesystem::path& run_dir, const EvolutionState& state,
                      const std::optional<nlohmann::json>& pending = std::nullopt);

struct LoadedCheckpoint {
    EvolutionState state;
    std::optional<nlohmann::json> pending;
};
std::optional<LoadedCheckpoint> read_checkpoint(const std::filesystem::path& run_dir);

struct InferResult {
    std::string response;
    bool rewrote = false;
    std::optional<double> coherence;  // absent for single-turn contexts
    DialogueContext used;
};

/// Rewrites only when t >= 2 and coherence < phi (phi >= 1 always rewrites);
/// picks the most coherent candidate. The rewriter runs at most once.
InferResult infer(const DialogueContext& context, const ar::ARModeld& arhead, Embedder& embedder,
                  ContextRewriter& rewriter, TextGenerator& responder, const EvolveConfig& config);

}  // namespace dialign
