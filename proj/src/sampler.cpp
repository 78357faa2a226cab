#include "dialign/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "dialign/errors.hpp"

namespace dialign {

namespace {

bool blank(const std::string& s) {
    return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

std::vector<std::string> path_texts(const RewriteTree& tree, int leaf) {
    std::vector<std::string> texts;
    for (int id = leaf; tree.nodes[static_cast<std::size_t>(id)].parent;
         id = *tree.nodes[static_cast<std::size_t>(id)].parent) {
        texts.push_back(*tree.nodes[static_cast<std::size_t>(id)].text);
    }
    std::reverse(texts.begin(), texts.end());
    return texts;
}

}  // namespace

void SamplerConfig::check() const {
    if (n < 1) throw ConfigError("sampler: n must be >= 1");
    if (max_paths < 1) throw ConfigError("sampler: max_paths must be >= 1");
    if (static_cast<int>(temperatures.size()) != n) {
        throw ConfigError("sampler: temperatures must list exactly n values");
    }
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("sampler: lambda must lie in [0, 1]");
    if (parallelism < 1) throw ConfigError("sampler: parallelism must be >= 1");
    if (max_tokens < 1) throw ConfigError("sampler: max_tokens must be >= 1");
}

std::vector<Candidate> expand(std::span<const std::string> prefix,
                              const DialogueContext& original, int l, TextGenerator& generator,
                              const SamplerConfig& config) {
    config.check();
    if (l < 1 || l > original.size()) throw DataError("expand: utterance index out of range");
    if (static_cast<int>(prefix.size()) != l - 1) {
        throw DataError("expand: prefix must hold exactly l - 1 utterances");
    }
    PromptExtras extras;
    extras.rewritten_prefix = std::vector<std::string>(prefix.begin(), prefix.end());
    const std::string prompt = render_prompt(original, kRewriteUtterance, extras);

    GenerationParams params;
    params.max_tokens = config.max_tokens;
    params.seed = config.seed;
    const auto texts =
        generate_many(generator, prompt, config.temperatures, params, config.parallelism);

    std::vector<Candidate> out;
    out.reserve(texts.size());
    for (const auto& text : texts) {
        if (blank(text)) {
            out.push_back({original.turn(l).text, true});
        } else {
            out.push_back({text, false});
        }
    }
    return out;
}

PruneResult prune(std::span<const Candidate> candidates, const std::string& original,
                  SimilarityScorer& scorer, double lambda) {
    PruneResult result;
    for (const auto& c : candidates) {
        const double raw = scorer.similarity(c.text, original);
        if (!std::isfinite(raw)) throw BackendError(BackendErrorKind::MalformedResponse,
                                                    "similarity scorer returned a non-finite value");
        ScoredCandidateText scored{c.text, std::clamp(raw, 0.0, 1.0), c.fallback};
        (scored.similarity >= lambda ? result.survivors : result.pruned).push_back(std::move(scored));
    }
    if (result.survivors.empty()) {
        result.survivors.push_back({original, 1.0, true});
        result.fallback = true;
    }
    return result;
}

nlohmann::json RewriteTree::node_json(const RewriteNode& node) const {
    return {{"id", node.id},
            {"layer", node.layer},
            {"text", node.text ? nlohmann::json(*node.text) : nlohmann::json(nullptr)},
            {"parent_id", node.parent ? nlohmann::json(*node.parent) : nlohmann::json(nullptr)},
            {"similarity", node.similarity},
            {"pruned", node.pruned},
            {"fallback", node.fallback}};
}

void RewriteTree::dump_jsonl(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write tree dump '" + path.string() + "'");
    for (const auto& node : nodes) out << node_json(node).dump() << '\n';
    if (!out) throw DataError("I/O failure writing tree dump '" + path.string() + "'");
}

RewriteResult rewrite_context(const DialogueContext& context, TextGenerator& generator,
                              SimilarityScorer& scorer, const SamplerConfig& config) {
    config.check();
    if (context.size() < 1) throw DataError("rewrite_context: context has no turns");
    if (const auto report = validate(context); !report.empty()) {
        throw DataError("rewrite_context: invalid context: " + report.front().field + ": " +
                        report.front().message);
    }

    RewriteResult result;
    auto& nodes = result.tree.nodes;
    nodes.push_back(RewriteNode{});
    std::vector<int> frontier{0};

    for (int l = 1; l <= context.size(); ++l) {
        std::vector<int> next;
        for (int parent : frontier) {
            const auto prefix = path_texts(result.tree, parent);
            auto candidates = expand(prefix, context, l, generator, config);

            std::vector<Candidate> unique;
            for (auto& c : candidates) {
                const bool seen = std::any_of(unique.begin(), unique.end(),
                                              [&](const Candidate& u) { return u.text == c.text; });
                if (!seen) unique.push_back(std::move(c));
            }

            const auto pr = prune(unique, context.turn(l).text, scorer, config.lambda);
            auto add = [&](const ScoredCandidateText& s, bool pruned) {
                RewriteNode node;
                node.id = static_cast<int>(nodes.size());
                node.layer = l + 1;
                node.text = s.text;
                node.parent = parent;
                node.similarity = s.similarity;
                node.pruned = pruned;
                node.fallback = s.fallback;
                nodes[static_cast<std::size_t>(parent)].children.push_back(node.id);
                nodes.push_back(std::move(node));
                return nodes.back().id;
            };
            // Children keep generation order; an injected original goes last.
            if (pr.fallback) {
                for (const auto& p : pr.pruned) add(p, true);
                next.push_back(add(pr.survivors.front(), false));
            } else {
                std::size_t si = 0, pi = 0;
                for (const auto& c : unique) {
                    if (si < pr.survivors.size() && pr.survivors[si].text == c.text) {
                        next.push_back(add(pr.survivors[si++], false));
                    } else {
                        add(pr.pruned[pi++], true);
                    }
                }
            }
        }
        if (next.size() > static_cast<std::size_t>(config.max_paths)) {
            next.resize(static_cast<std::size_t>(config.max_paths));
        }
        frontier = std::move(next);
    }

    for (int leaf : frontier) {
        result.contexts.push_back(with_rewritten_texts(context, path_texts(result.tree, leaf)));
    }
    return result;
}

RewriteResult TreeRewriter::rewrite(const DialogueContext& context) {
    ++calls_;
    return rewrite_context(context, generator_, scorer_, config_);
}

}  // namespace dialign
