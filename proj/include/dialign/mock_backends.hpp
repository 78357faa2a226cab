#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dialign/backends.hpp"

// Deterministic stand-ins for every backend role. Each is a pure function of
// its inputs and seed, so pipelines built on them replay byte-identically.
namespace dialign::mock {

/// Script file: {"completions": {"<sha256(prompt)>+<temperature>": text},
///               "embeddings": {"<sha256(text)>": seed}}
struct MockScript {
    std::map<std::string, std::string> completions;
    std::map<std::string, std::uint64_t> embedding_seeds;

    static MockScript load(const std::filesystem::path& path);
    static std::string completion_key(const std::string& prompt, double temperature);
};

/// How unscripted rewrite prompts are answered.
enum class RewriteStyle {
    Varied,      // hash-chosen among: add address marker, verbatim, light paraphrase
    Strengthen,  // always add the address marker
    Echo,        // verbatim copy of the utterance
};

/// Turn texts starting with '@' carry an explicit address and a stronger
/// planted signal in MockEmbedder.
bool has_address_marker(std::string_view text);

class MockGenerator final : public TextGenerator {
public:
    MockGenerator(std::string model_id, std::uint64_t seed,
                  std::shared_ptr<const MockScript> script = nullptr,
                  RewriteStyle style = RewriteStyle::Varied, bool strict = false);

    std::string generate(const std::string& prompt, const GenerationParams& params) override;
    std::string model_id() const override { return model_id_; }
    std::size_t calls() const { return calls_.load(); }

private:
    std::string model_id_;
    std::uint64_t seed_;
    std::shared_ptr<const MockScript> script_;
    RewriteStyle style_;
    bool strict_;
    std::atomic<std::size_t> calls_{0};
};

/// Wraps a callable; handy for hand-scripted tests.
class FunctionGenerator final : public TextGenerator {
public:
    using Fn = std::function<std::string(const std::string&, const GenerationParams&)>;
    explicit FunctionGenerator(Fn fn, std::string model_id = "function")
        : fn_(std::move(fn)), model_id_(std::move(model_id)) {}

    std::string generate(const std::string& prompt, const GenerationParams& params) override {
        ++calls_;
        return fn_(prompt, params);
    }
    std::string model_id() const override { return model_id_; }
    std::size_t calls() const { return calls_.load(); }

private:
    Fn fn_;
    std::string model_id_;
    std::atomic<std::size_t> calls_{0};
};

class MockGeneratorFactory final : public GeneratorFactory {
public:
    MockGeneratorFactory(std::uint64_t seed, std::shared_ptr<const MockScript> script = nullptr,
                         RewriteStyle style = RewriteStyle::Varied)
        : seed_(seed), script_(std::move(script)), style_(style) {}

    std::shared_ptr<TextGenerator> for_model(const std::string& model_id) override {
        return std::make_shared<MockGenerator>(model_id, seed_, script_, style_);
    }

private:
    std::uint64_t seed_;
    std::shared_ptr<const MockScript> script_;
    RewriteStyle style_;
};

/// Layout of a planted embedding (dims [0, K) and [K, 2K) with K = max_turns):
///   own-position one-hot * position_scale
///   + reply-target one-hot * strength * (1 if marked else weak_fraction)
///   + noise * N(0, 1) on every dimension, seeded by (speaker ordinal, text).
struct PlantedSignal {
    int max_turns = 8;
    double position_scale = 10.0;
    double strength = 10.0;
    double weak_fraction = 0.25;
    double noise = 0.05;
};

class MockEmbedder final : public Embedder {
public:
    MockEmbedder(int dim, std::uint64_t seed, std::optional<PlantedSignal> planted = std::nullopt,
                 std::shared_ptr<const MockScript> script = nullptr);

    Eigen::MatrixXd embed_turns(const DialogueContext& context) override;
    int dim() const override { return dim_; }
    std::size_t calls() const { return calls_.load(); }

private:
    int dim_;
    std::uint64_t seed_;
    std::optional<PlantedSignal> planted_;
    std::shared_ptr<const MockScript> script_;
    std::atomic<std::size_t> calls_{0};
};

/// Scripted pairs first, then cosine of token-count vectors.
class MockSimilarity final : public SimilarityScorer {
public:
    MockSimilarity() = default;
    explicit MockSimilarity(std::function<double(std::string_view, std::string_view)> fn)
        : fn_(std::move(fn)) {}

    void script(const std::string& a, const std::string& b, double value);
    double similarity(std::string_view a, std::string_view b) override;

private:
    std::function<double(std::string_view, std::string_view)> fn_;
    std::map<std::pair<std::string, std::string>, double> table_;
};

double lexical_cosine(std::string_view a, std::string_view b);

/// Returns "<base>+r<round>" (the base id itself without tag_rounds) and
/// records every request.
class MockTrainerHook final : public TrainerHook {
public:
    std::string train(const TrainRequest& request) override;

    bool tag_rounds = true;
    std::optional<ModelRole> fail_on;  // throws TrainerFailure for this role
    std::vector<TrainRequest> requests() const;

private:
    mutable std::mutex mutex_;
    std::vector<TrainRequest> requests_;
};

}  // namespace dialign::mock
