#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dialign/backends.hpp"
#include "dialign/corpus.hpp"

namespace dialign {

struct SamplerConfig {
    int n = 2;
    double lambda = 0.7;
    int max_paths = 8;
    std::vector<double> temperatures{0.7, 1.0};
    std::uint64_t seed = 0;
    int parallelism = 4;
    int max_tokens = 256;

    void check() const;
};

struct Candidate {
    std::string text;
    bool fallback = false;  // stands in for the original utterance
};

/// n rewrites of utterance l (1-based) conditioned on the rewritten prefix.
/// Empty generations are replaced by the original utterance and flagged.
std::vector<Candidate> expand(std::span<const std::string> prefix,
                              const DialogueContext& original, int l, TextGenerator& generator,
                              const SamplerConfig& config);

struct ScoredCandidateText {
    std::string text;
    double similarity = 0.0;  // clamped to [0, 1]
    bool fallback = false;
};

struct PruneResult {
    std::vector<ScoredCandidateText> survivors;
    std::vector<ScoredCandidateText> pruned;
    bool fallback = false;  // every candidate fell below lambda
};

PruneResult prune(std::span<const Candidate> candidates, const std::string& original,
                  SimilarityScorer& scorer, double lambda);

struct RewriteNode {
    int id = 0;
    int layer = 1;  // root is layer 1; layer l + 1 holds rewrites of utterance l
    std::optional<std::string> text;
    std::optional<int> parent;
    double similarity = 1.0;
    bool pruned = false;
    bool fallback = false;
    std::vector<int> children;
};

struct RewriteTree {
    std::vector<RewriteNode> nodes;  // nodes[0] is the root

    nlohmann::json node_json(const RewriteNode& node) const;
    void dump_jsonl(const std::filesystem::path& path) const;
};

struct RewriteResult {
    std::vector<DialogueContext> contexts;  // DFS order, at most max_paths
    RewriteTree tree;
};

/// Builds the candidate tree layer by layer and returns the first max_paths
/// root-to-leaf paths in depth-first order. The frontier is cut to max_paths
/// nodes per layer: every kept node has at least one leaf below it, so the
/// cut never changes which paths come first.
RewriteResult rewrite_context(const DialogueContext& context, TextGenerator& generator,
                              SimilarityScorer& scorer, const SamplerConfig& config);

/// One logical rewrite of a whole context.
class ContextRewriter {
public:
    virtual ~ContextRewriter() = default;
    virtual RewriteResult rewrite(const DialogueContext& context) = 0;
};

class TreeRewriter final : public ContextRewriter {
public:
    TreeRewriter(TextGenerator& generator, SimilarityScorer& scorer, SamplerConfig config)
        : generator_(generator), scorer_(scorer), config_(std::move(config)) {}

    RewriteResult rewrite(const DialogueContext& context) override;
    std::size_t calls() const { return calls_.load(); }

private:
    TextGenerator& generator_;
    SimilarityScorer& scorer_;
    SamplerConfig config_;
    std::atomic<std::size_t> calls_{0};
};

}  // namespace dialign
