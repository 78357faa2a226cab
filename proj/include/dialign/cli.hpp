#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dialign/arhead.hpp"
#include "dialign/backends.hpp"
#include "dialign/evolve.hpp"
#include "dialign/mock_backends.hpp"

namespace dialign {

/// Process exit codes. Scripts may rely on these values.
enum ExitCode : int {
    kExitOk = 0,
    kExitConfig = 2,
    kExitBackend = 3,
    kExitData = 4,
    kExitInternal = 5,
};

struct MockBackendConfig {
    int embed_dim = 16;
    bool planted = true;
    mock::RewriteStyle style = mock::RewriteStyle::Varied;
    std::optional<std::filesystem::path> script;
};

/// One JSON file binds every stage. Relative paths resolve against the
/// directory holding the config file.
struct EngineConfig {
    struct Paths {
        std::optional<std::filesystem::path> train;
        std::optional<std::filesystem::path> valid;
        std::optional<std::filesystem::path> test;
        std::filesystem::path checkpoint = "ar-head.json";
        std::filesystem::path out_dir = "out";
    } paths;

    std::string backend_mode = "mock";  // "mock" or "http"
    MockBackendConfig mock;
    std::optional<BackendEndpoint> rewriter;
    std::optional<BackendEndpoint> responder;
    std::optional<BackendEndpoint> teacher;
    std::optional<BackendEndpoint> embedder;
    std::optional<BackendEndpoint> similarity;
    int embed_dim = 0;  // required for the http embedder
    std::optional<std::string> trainer_command;

    // Model ids used when the matching endpoint is absent (mock mode).
    std::string rewriter_model = "rewriter-v0";
    std::string responder_model = "responder-v0";
    std::string teacher_model = "teacher";

    ar::ARTrainConfig arhead;
    std::optional<int> input_dim;  // defaults to the embedder's dimension
    double holdout = 0.1;          // used when no validation set is given
    ar::CoherenceProxy proxy = ar::CoherenceProxy::Probability;

    EvolveConfig evolve;
    std::vector<std::string> metrics{"bleu1", "bleu2", "bleu3", "bleu4",
                                     "meteor", "rouge_l", "dist1", "dist2"};
    std::uint64_t seed = 0;

    /// Copies the global seed into every seeded component.
    void apply_seed(std::uint64_t value);
    /// Range checks for every numeric field. Throws ConfigError.
    void check() const;
};

/// Rejects unknown keys so that typos fail loudly.
EngineConfig engine_config_from_json(const nlohmann::json& json,
                                     const std::filesystem::path& base_dir);
EngineConfig load_engine_config(const std::filesystem::path& path);
/// Normalized form, used for output digests. Holds env var names, never keys.
nlohmann::json to_json(const EngineConfig& config);

/// Backends realized from a config. Construction makes no network calls.
struct Backends {
    std::unique_ptr<GeneratorFactory> generators;
    std::shared_ptr<TextGenerator> teacher;
    std::unique_ptr<Embedder> embedder;
    std::unique_ptr<SimilarityScorer> similarity;
    std::unique_ptr<TrainerHook> trainer;
    std::string rewriter_id;
    std::string responder_id;
};

Backends make_backends(const EngineConfig& config);

/// Full command-line entry point; args[0] is the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dialign
