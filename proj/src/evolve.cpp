#include "dialign/evolve.hpp"

#include <algorithm>
#include <fstream>
#include <future>

#include "dialign/digest.hpp"
#include "dialign/errors.hpp"
#include "dialign/metrics.hpp"

namespace dialign {

namespace fs = std::filesystem;

namespace {

constexpr const char* kFormatName = "dialign-evolve";
constexpr int kFormatVersion = 1;

std::string respond(TextGenerator& responder, const DialogueContext& context,
                    const GenerationParams& params) {
    return responder.generate(render_prompt(context, kGenerateResponse), params);
}

nlohmann::json files_json(const RoundFiles& f) {
    return {{"rewrite", f.rewrite.generic_string()},
            {"response", f.response.generic_string()},
            {"rewrite_sha256", f.rewrite_sha256},
            {"response_sha256", f.response_sha256},
            {"rewrite_pairs", f.rewrite_pairs},
            {"response_pairs", f.response_pairs}};
}

RoundFiles files_from_json(const nlohmann::json& j) {
    RoundFiles f;
    f.rewrite = j.at("rewrite").get<std::string>();
    f.response = j.at("response").get<std::string>();
    f.rewrite_sha256 = j.at("rewrite_sha256").get<std::string>();
    f.response_sha256 = j.at("response_sha256").get<std::string>();
    f.rewrite_pairs = j.at("rewrite_pairs").get<std::size_t>();
    f.response_pairs = j.at("response_pairs").get<std::size_t>();
    return f;
}

void verify_files(const fs::path& run_dir, const RoundFiles& f) {
    if (file_sha256(run_dir / f.rewrite) != f.rewrite_sha256 ||
        file_sha256(run_dir / f.response) != f.response_sha256) {
        throw DataError("checkpoint: dataset files under '" + run_dir.string() +
                        "' no longer match their recorded digests");
    }
}

// Fans work out over contexts in waves of at most `parallelism` tasks;
// results stay in input order.
template <typename Fn>
auto for_each_context(std::size_t count, int parallelism, Fn fn) {
    using Result = decltype(fn(std::size_t{0}));
    std::vector<Result> out;
    out.reserve(count);
    const std::size_t wave = static_cast<std::size_t>(std::max(1, parallelism));
    for (std::size_t begin = 0; begin < count; begin += wave) {
        const std::size_t end = std::min(count, begin + wave);
        std::vector<std::future<Result>> pending;
        for (std::size_t i = begin; i < end; ++i) {
            pending.push_back(std::async(wave == 1 ? std::launch::deferred : std::launch::async, fn, i));
        }
        std::exception_ptr failure;
        for (auto& p : pending) {
            try {
                out.push_back(p.get());
            } catch (...) {
                if (!failure) failure = std::current_exception();
            }
        }
        if (failure) std::rethrow_exception(failure);
    }
    return out;
}

struct CollectedRound {
    std::vector<ContextOutcome> outcomes;
    std::vector<DialogueContext> working;
    int replacements = 0;
    std::vector<PreferencePair> rewrite_pairs;
    std::vector<PreferencePair> response_pairs;
};

CollectedRound collect(std::span<const DialogueContext> working, int round,
                       TextGenerator& rewriter, TextGenerator& responder,
                       BackendBundle& backends, const EvolveConfig& config) {
    auto outcomes = for_each_context(working.size(), config.parallelism, [&](std::size_t i) {
        const DialogueContext& h = working[i];
        const auto sampled =
            rewrite_context(h, rewriter, backends.similarity, config.sampler_for(round, i));
        ContextOutcome outcome;
        outcome.scores = score_candidates(h, sampled.contexts, responder, backends.arhead,
                                          backends.embedder, config.tau, config.response);
        outcome.pairs = build_preference_sets(h, outcome.scores.candidates);
        return outcome;
    });
    CollectedRound c;
    for (std::size_t i = 0; i < outcomes.size(); ++i) {
        auto& o = outcomes[i];
        const auto rep = maybe_replace(working[i], o.scores.candidates, o.scores.z0);
        o.replaced = rep.replaced;
        c.replacements += rep.replaced ? 1 : 0;
        c.working.push_back(rep.context);
        if (o.pairs.rewrite) c.rewrite_pairs.push_back(*o.pairs.rewrite);
        if (o.pairs.response) c.response_pairs.push_back(*o.pairs.response);
    }
    c.outcomes = std::move(outcomes);
    return c;
}

RoundFiles export_round(const fs::path& run_dir, const fs::path& rel_dir, int round,
                        const CollectedRound& c) {
    fs::create_directories(run_dir / rel_dir);
    RoundFiles f;
    f.rewrite = rel_dir / "rewrite.jsonl";
    f.response = rel_dir / "response.jsonl";
    f.rewrite_pairs = dpo::export_preferences(c.rewrite_pairs, round, run_dir / f.rewrite);
    f.response_pairs = dpo::export_preferences(c.response_pairs, round, run_dir / f.response);
    f.rewrite_sha256 = file_sha256(run_dir / f.rewrite);
    f.response_sha256 = file_sha256(run_dir / f.response);
    return f;
}

std::string train_or_skip(TrainerHook& trainer, BackendBundle& backends, const fs::path& file,
                          std::size_t pairs, const std::string& base, ModelRole role, int round,
                          const nlohmann::json& params) {
    if (pairs == 0) {
        backends.notice(std::string("round ") + std::to_string(round) + ": no " +
                        to_string(role) + " preference pairs; trainer skipped, model stays " + base);
        return base;
    }
    TrainRequest req;
    req.preference_file = file;
    req.base_model = base;
    req.role = role;
    req.round = round;
    req.params = params;
    auto id = trainer.train(req);
    if (id.empty()) throw BackendError(BackendErrorKind::TrainerFailure, "trainer returned an empty model id");
    return id;
}

// Trainer calls of a pending round, then the committed state.
EvolutionState finish_pending(const EvolutionState& state, nlohmann::json pending,
                              BackendBundle& backends, TrainerHook& trainer,
                              const EvolveConfig& config, const fs::path& run_dir) {
    const int round = pending.at("round").get<int>();
    const RoundFiles files = files_from_json(pending.at("files"));
    verify_files(run_dir, files);

    if (!pending.contains("rewriter_model_id")) {
        pending["rewriter_model_id"] =
            train_or_skip(trainer, backends, run_dir / files.rewrite, files.rewrite_pairs,
                          state.rewriter_model_id, ModelRole::Rewriter, round, config.trainer_params);
        write_checkpoint(run_dir, state, pending);
    }
    const std::string responder =
        train_or_skip(trainer, backends, run_dir / files.response, files.response_pairs,
                      state.responder_model_id, ModelRole::Responder, round, config.trainer_params);

    EvolutionState next = state;
    next.k = round;
    next.working_contexts.clear();
    for (const auto& c : pending.at("working_contexts")) next.working_contexts.push_back(context_from_json(c));
    next.replacement_count = pending.at("replacement_count").get<int>();
    next.rewriter_model_id = pending.at("rewriter_model_id").get<std::string>();
    next.responder_model_id = responder;
    next.dataset_paths.push_back(files);
    write_checkpoint(run_dir, next);
    return next;
}

std::string run_fingerprint(const Dataset& dataset, const EvolveConfig& config,
                            const std::string& rewriter, const std::string& responder) {
    nlohmann::json j;
    for (const auto& c : dataset.contexts) j["contexts"].push_back(to_json(c));
    j["rewriter"] = rewriter;
    j["responder"] = responder;
    j["seed"] = config.seed;
    j["candidates"] = config.candidates;
    j["tau"] = config.tau;
    j["lambda"] = config.sampler.lambda;
    j["n"] = config.sampler.n;
    j["temperatures"] = config.sampler.temperatures;
    j["response_temperature"] = config.response.temperature;
    j["trainer_params"] = config.trainer_params;
    return sha256_hex(j.dump());
}

}  // namespace

void EvolveConfig::check() const {
    if (rounds < 1) throw ConfigError("evolve: rounds must be >= 1");
    if (candidates < 2) throw ConfigError("evolve: candidates must be >= 2");
    if (!(phi >= 0.0 && phi <= 1.0)) throw ConfigError("evolve: phi must lie in [0, 1]");
    if (!(tau > 0.0)) throw ConfigError("evolve: tau must be positive");
    if (parallelism < 1) throw ConfigError("evolve: parallelism must be >= 1");
    if (response.max_tokens < 1 || response.temperature < 0.0) {
        throw ConfigError("evolve: response max_tokens must be >= 1 and temperature >= 0");
    }
    sampler.check();
    dpo.check();
}

SamplerConfig EvolveConfig::sampler_for(int round, std::size_t context_index) const {
    SamplerConfig s = sampler;
    s.max_paths = candidates;
    s.seed = sha256_u64(std::to_string(seed) + "|" + std::to_string(round) + "|" +
                        std::to_string(context_index));
    return s;
}

CandidateScores score_candidates(const DialogueContext& original,
                                 std::span<const DialogueContext> rewritten,
                                 TextGenerator& responder, const ar::ARModeld& arhead,
                                 Embedder& embedder, double tau,
                                 const GenerationParams& response_params) {
    if (rewritten.empty()) throw DataError("score_candidates: no rewritten candidates");
    if (!original.gold_response) throw DataError("score_candidates: context has no gold_response");
    const std::string& gold = *original.gold_response;

    CandidateScores out;
    std::vector<double> c, r;
    for (const auto& h : rewritten) {
        ScoredCandidate sc;
        sc.context = h;
        sc.response = respond(responder, h, response_params);
        sc.coherence = ar::coherence(h, arhead, embedder);
        sc.quality = metrics::response_quality(sc.response, gold);
        c.push_back(sc.coherence);
        r.push_back(sc.quality);
        out.candidates.push_back(std::move(sc));
    }
    const auto z = rewrite_scores(c, r, tau);
    for (std::size_t i = 0; i < z.z.size(); ++i) out.candidates[i].rewrite_score = z.z[i];
    out.weights = z.weights;
    out.coherence0 = ar::coherence(original, arhead, embedder);
    out.quality0 = metrics::response_quality(respond(responder, original, response_params), gold);
    out.z0 = out.weights.combine(out.coherence0, out.quality0);
    return out;
}

Replacement maybe_replace(const DialogueContext& original,
                          std::span<const ScoredCandidate> candidates, double z0) {
    if (candidates.empty()) throw DataError("maybe_replace: no candidates");
    std::size_t best = 0;
    for (std::size_t i = 1; i < candidates.size(); ++i) {
        if (candidates[i].rewrite_score > candidates[best].rewrite_score) best = i;
    }
    if (candidates[best].rewrite_score > z0) return {candidates[best].context, true, best};
    return {original, false, 0};
}

EvolutionState initial_state(const Dataset& dataset, std::string rewriter_model_id,
                             std::string responder_model_id, std::uint64_t seed) {
    EvolutionState s;
    s.working_contexts = dataset.contexts;
    s.rewriter_model_id = std::move(rewriter_model_id);
    s.responder_model_id = std::move(responder_model_id);
    s.rng_seed = seed;
    return s;
}

EvolutionState run_round(const EvolutionState& state, BackendBundle& backends,
                         TrainerHook& trainer, const EvolveConfig& config,
                         const fs::path& run_dir, RoundReport* report) {
    config.check();
    if (run_dir.empty()) throw ConfigError("run_round: a run directory is required");
    if (state.k >= config.rounds) throw ConfigError("run_round: all configured rounds are complete");
    const int round = state.k + 1;
    const fs::path rel_dir = "round-" + std::to_string(round);
    fs::create_directories(run_dir);
    try {
        auto rewriter = backends.generators.for_model(state.rewriter_model_id);
        auto responder = backends.generators.for_model(state.responder_model_id);
        auto collected = collect(state.working_contexts, round, *rewriter, *responder, backends, config);
        const RoundFiles files = export_round(run_dir, rel_dir, round, collected);

        nlohmann::json pending{{"round", round},
                               {"replacement_count", state.replacement_count + collected.replacements},
                               {"files", files_json(files)},
                               {"working_contexts", nlohmann::json::array()}};
        for (const auto& c : collected.working) pending["working_contexts"].push_back(to_json(c));
        write_checkpoint(run_dir, state, pending);

        auto next = finish_pending(state, std::move(pending), backends, trainer, config, run_dir);
        if (report) report->outcomes = std::move(collected.outcomes);
        return next;
    } catch (...) {
        std::error_code ec;
        fs::remove_all(run_dir / rel_dir, ec);
        write_checkpoint(run_dir, state);
        throw;
    }
}

EvolutionState run(const Dataset& dataset, BackendBundle& backends, TrainerHook& trainer,
                   const EvolveConfig& config, const fs::path& run_dir,
                   const std::string& rewriter_model_id, const std::string& responder_model_id) {
    config.check();
    if (dataset.contexts.empty()) throw DataError("evolve: empty dataset");
    const std::string fingerprint =
        run_fingerprint(dataset, config, rewriter_model_id, responder_model_id);

    EvolutionState state;
    if (auto loaded = read_checkpoint(run_dir)) {
        if (loaded->state.fingerprint != fingerprint) {
            throw ConfigError("evolve: '" + run_dir.string() +
                              "' holds a run with different inputs; use --force or a new directory");
        }
        for (const auto& f : loaded->state.dataset_paths) verify_files(run_dir, f);
        state = loaded->state;
        if (loaded->pending) {
            backends.notice("resuming the trainer phase of round " +
                            std::to_string(loaded->pending->at("round").get<int>()));
            try {
                state = finish_pending(state, *loaded->pending, backends, trainer, config, run_dir);
            } catch (...) {
                write_checkpoint(run_dir, state);
                throw;
            }
        }
    } else {
        state = initial_state(dataset, rewriter_model_id, responder_model_id, config.seed);
        state.fingerprint = fingerprint;
        write_checkpoint(run_dir, state);
    }
    while (state.k < config.rounds) {
        state = run_round(state, backends, trainer, config, run_dir);
        backends.notice("round " + std::to_string(state.k) + " complete: " +
                        std::to_string(state.dataset_paths.back().rewrite_pairs) + " rewrite pairs, " +
                        std::to_string(state.dataset_paths.back().response_pairs) +
                        " response pairs, " + std::to_string(state.replacement_count) +
                        " replacements so far");
    }
    return state;
}

WarmupResult warm_up(const Dataset& dataset, TextGenerator& teacher, BackendBundle& backends,
                     TrainerHook& trainer, const EvolveConfig& config, const fs::path& out_dir,
                     const std::string& rewriter_model_id, const std::string& responder_model_id) {
    config.check();
    if (dataset.contexts.empty()) throw DataError("warm-up: empty dataset");
    auto responder = backends.generators.for_model(responder_model_id);
    const auto collected = collect(dataset.contexts, 0, teacher, *responder, backends, config);
    WarmupResult out;
    out.files = export_round(out_dir, "warmup", 0, collected);
    out.rewriter_model_id =
        train_or_skip(trainer, backends, out_dir / out.files.rewrite, out.files.rewrite_pairs,
                      rewriter_model_id, ModelRole::Rewriter, 0, config.trainer_params);
    out.responder_model_id =
        train_or_skip(trainer, backends, out_dir / out.files.response, out.files.response_pairs,
                      responder_model_id, ModelRole::Responder, 0, config.trainer_params);
    return out;
}

nlohmann::json checkpoint_json(const EvolutionState& state,
                               const std::optional<nlohmann::json>& pending) {
    nlohmann::json j{{"format", kFormatName},
                     {"format_version", kFormatVersion},
                     {"k", state.k},
                     {"rewriter_model_id", state.rewriter_model_id},
                     {"responder_model_id", state.responder_model_id},
                     {"rng_seed", state.rng_seed},
                     {"replacement_count", state.replacement_count},
                     {"fingerprint", state.fingerprint},
                     {"dataset_paths", nlohmann::json::array()},
                     {"working_contexts", nlohmann::json::array()},
                     {"pending", pending ? *pending : nlohmann::json(nullptr)}};
    for (const auto& f : state.dataset_paths) j["dataset_paths"].push_back(files_json(f));
    for (const auto& c : state.working_contexts) j["working_contexts"].push_back(to_json(c));
    return j;
}

EvolutionState state_from_json(const nlohmann::json& j) {
    try {
        if (j.at("format").get<std::string>() != kFormatName ||
            j.at("format_version").get<int>() != kFormatVersion) {
            throw DataError("checkpoint: unsupported format");
        }
        EvolutionState s;
        s.k = j.at("k").get<int>();
        s.rewriter_model_id = j.at("rewriter_model_id").get<std::string>();
        s.responder_model_id = j.at("responder_model_id").get<std::string>();
        s.rng_seed = j.at("rng_seed").get<std::uint64_t>();
        s.replacement_count = j.at("replacement_count").get<int>();
        s.fingerprint = j.at("fingerprint").get<std::string>();
        for (const auto& f : j.at("dataset_paths")) s.dataset_paths.push_back(files_from_json(f));
        for (const auto& c : j.at("working_contexts")) s.working_contexts.push_back(context_from_json(c));
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("checkpoint: ") + e.what());
    }
}

void write_checkpoint(const fs::path& run_dir, const EvolutionState& state,
                      const std::optional<nlohmann::json>& pending) {
    fs::create_directories(run_dir);
    const fs::path target = run_dir / kCheckpointName;
    const fs::path tmp = run_dir / (std::string(kCheckpointName) + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write checkpoint '" + tmp.string() + "'");
        out << checkpoint_json(state, pending).dump(2) << '\n';
        out.flush();
        if (!out) throw DataError("I/O failure writing checkpoint '" + tmp.string() + "'");
    }
    fs::rename(tmp, target);
}

std::optional<LoadedCheckpoint> read_checkpoint(const fs::path& run_dir) {
    const fs::path path = run_dir / kCheckpointName;
    if (!fs::exists(path)) return std::nullopt;
    std::ifstream in(path);
    if (!in) throw DataError("cannot open checkpoint '" + path.string() + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError("checkpoint '" + path.string() + "' is not valid JSON: " + e.what());
    }
    LoadedCheckpoint out{state_from_json(j), std::nullopt};
    if (!j.at("pending").is_null()) out.pending = j.at("pending");
    return out;
}

InferResult infer(const DialogueContext& context, const ar::ARModeld& arhead, Embedder& embedder,
                  ContextRewriter& rewriter, TextGenerator& responder, const EvolveConfig& config) {
    if (context.size() < 1) throw DataError("infer: context has no turns");
    if (!(config.phi >= 0.0 && config.phi <= 1.0)) throw ConfigError("infer: phi must lie in [0, 1]");
    InferResult out;
    out.used = context;
    if (context.size() >= 2) {
        const double c = ar::coherence(context, arhead, embedder);
        out.coherence = c;
        if (c < config.phi || config.phi >= 1.0) {
            const auto rewritten = rewriter.rewrite(context);
            out.rewrote = true;
            double best = -1.0;
            for (const auto& candidate : rewritten.contexts) {
                const double cc = ar::coherence(candidate, arhead, embedder);
                if (cc > best) {
                    best = cc;
                    out.used = candidate;
                }
            }
        }
    }
    out.response = respond(responder, out.used, config.response);
    return out;
}

}  // namespace dialign
