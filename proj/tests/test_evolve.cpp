#include <doctest.h>

#include <cmath>

#include "dialign/digest.hpp"
#include "dialign/evolve.hpp"
#include "dialign/metrics.hpp"
#include "dialign/mock_backends.hpp"
#include "dialign/synthetic.hpp"
#include "test_support.hpp"

using namespace dialign;
using dialign::testing::make_context;
using dialign::testing::read_file;
using dialign::testing::TempDir;

namespace {

struct Fixture {
    Dataset data;
    mock::MockGeneratorFactory generators{11};
    mock::MockEmbedder embedder{16, 3, mock::PlantedSignal{}};
    mock::MockSimilarity similarity;
    ar::ARModeld model = ar::init_model(16, 8, 4, 5);
    std::vector<std::string> notices;
    BackendBundle bundle{generators, embedder, similarity, model,
                         [this](const std::string& s) { notices.push_back(s); }};
    EvolveConfig config;

    explicit Fixture(int contexts = 4) {
        SyntheticConfig sc;
        sc.contexts = contexts;
        sc.min_turns = 2;
        sc.max_turns = 4;
        sc.seed = 99;
        data.contexts = synthetic_corpus(sc);
        config.rounds = 2;
        config.candidates = 3;
        config.parallelism = 2;
        config.seed = 1;
    }
};

class CountingRewriter final : public ContextRewriter {
public:
    explicit CountingRewriter(std::function<DialogueContext(const DialogueContext&)> fn) : fn_(std::move(fn)) {}
    RewriteResult rewrite(const DialogueContext& c) override {
        ++calls;
        RewriteResult r;
        r.contexts.push_back(fn_(c));
        return r;
    }
    int calls = 0;

private:
    std::function<DialogueContext(const DialogueContext&)> fn_;
};

std::vector<std::string> dir_digests(const std::filesystem::path& dir) {
    std::vector<std::string> out;
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
        if (e.is_regular_file()) files.push_back(std::filesystem::relative(e.path(), dir));
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) out.push_back(f.generic_string() + ":" + file_sha256(dir / f));
    return out;
}

}  // namespace

TEST_CASE("EvolveConfig validation") {
    EvolveConfig c;
    CHECK_NOTHROW(c.check());
    c.rounds = 0;
    CHECK_THROWS_AS(c.check(), ConfigError);
    c = {};
    c.candidates = 1;
    CHECK_THROWS_AS(c.check(), ConfigError);
    c = {};
    c.phi = 1.5;
    CHECK_THROWS_AS(c.check(), ConfigError);
    c = {};
    c.tau = 0.0;
    CHECK_THROWS_AS(c.check(), ConfigError);
}

TEST_CASE("score_candidates") {
    Fixture f;
    const auto& original = f.data.contexts[0];
    mock::FunctionGenerator gold([&](const std::string&, const GenerationParams&) { return *original.gold_response; });
    const std::vector<DialogueContext> one{original};
    const auto all_gold = score_candidates(original, one, gold, f.model, f.embedder, 0.9);
    CHECK(all_gold.candidates[0].quality == doctest::Approx(1.0));
    CHECK(all_gold.quality0 == doctest::Approx(1.0));

    auto responder = f.generators.for_model("resp");
    const auto scored = score_candidates(original, one, *responder, f.model, f.embedder, 0.9);
    CHECK(scored.candidates[0].rewrite_score == scored.z0);

    // Three candidates: recompute c, r, weights, z, z0 from the parts.
    std::vector<DialogueContext> three;
    for (const char* suffix : {" alpha", "", " beta gamma"}) {
        std::vector<std::string> texts;
        for (const auto& t : original.turns) texts.push_back(t.text + suffix);
        three.push_back(with_rewritten_texts(original, texts));
    }
    const auto s3 = score_candidates(original, three, *responder, f.model, f.embedder, 0.9);
    std::vector<double> c, r;
    for (const auto& h : three) {
        c.push_back(ar::coherence(h, f.model, f.embedder));
        r.push_back(metrics::response_quality(responder->generate(render_prompt(h, kGenerateResponse), EvolveConfig{}.response),
                                              *original.gold_response));
    }
    auto cv = [](const std::vector<double>& v) {
        double m = 0, ss = 0;
        for (double x : v) m += x;
        m /= v.size();
        for (double x : v) ss += (x - m) * (x - m);
        return m == 0 ? 0.0 : std::sqrt(ss / v.size()) / m;
    };
    const double ac = std::exp(cv(c) / 0.9) / (std::exp(cv(c) / 0.9) + std::exp(cv(r) / 0.9));
    for (int i = 0; i < 3; ++i) {
        CHECK(s3.candidates[i].coherence == c[i]);
        CHECK(s3.candidates[i].quality == r[i]);
        CHECK(s3.candidates[i].rewrite_score == doctest::Approx(ac * c[i] + (1 - ac) * r[i]).epsilon(1e-12));
    }
    const double c0 = ar::coherence(original, f.model, f.embedder);
    const double r0 = metrics::response_quality(
        responder->generate(render_prompt(original, kGenerateResponse), EvolveConfig{}.response), *original.gold_response);
    CHECK(s3.z0 == doctest::Approx(ac * c0 + (1 - ac) * r0).epsilon(1e-12));

    auto no_gold = original;
    no_gold.gold_response.reset();
    CHECK_THROWS_AS(score_candidates(no_gold, one, *responder, f.model, f.embedder, 0.9), DataError);
    CHECK_THROWS_AS(score_candidates(original, std::vector<DialogueContext>{}, *responder, f.model, f.embedder, 0.9),
                    DataError);
}

TEST_CASE("maybe_replace") {
    const auto original = make_context({{"a", 0, "x"}, {"b", 1, "y"}}, "a", 2, "g");
    auto cand = [&](const std::string& t, double z) {
        ScoredCandidate s;
        s.context = with_rewritten_texts(original, std::vector<std::string>{t, "y"});
        s.rewrite_score = z;
        return s;
    };
    const std::vector<ScoredCandidate> low{cand("p", 0.55)};
    CHECK_FALSE(maybe_replace(original, low, 0.6).replaced);
    const std::vector<ScoredCandidate> two{cand("p", 0.7), cand("q", 0.65)};
    const auto rep = maybe_replace(original, two, 0.6);
    CHECK(rep.replaced);
    CHECK(rep.context.turn(1).text == "p");
    const std::vector<ScoredCandidate> tie{cand("p", 0.6)};
    const auto kept = maybe_replace(original, tie, 0.6);
    CHECK_FALSE(kept.replaced);
    CHECK(kept.context == original);
    const std::vector<ScoredCandidate> tied_max{cand("p", 0.7), cand("q", 0.7)};
    CHECK(maybe_replace(original, tied_max, 0.1).index == 0);
}

TEST_CASE("run_round: one round over two contexts") {
    Fixture f(2);
    TempDir dir;
    mock::MockTrainerHook trainer;
    trainer.tag_rounds = false;
    auto state = initial_state(f.data, "rw-v0", "resp-v0", f.config.seed);
    RoundReport report;
    const auto next = run_round(state, f.bundle, trainer, f.config, dir.path(), &report);
    CHECK(next.k == 1);
    REQUIRE(next.dataset_paths.size() == 1);
    CHECK(std::filesystem::exists(dir.path() / next.dataset_paths[0].rewrite));
    CHECK(std::filesystem::exists(dir.path() / next.dataset_paths[0].response));
    CHECK(next.rewriter_model_id == "rw-v0");
    CHECK(next.responder_model_id == "resp-v0");

    int replaced = 0;
    REQUIRE(report.outcomes.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        const auto& o = report.outcomes[i];
        replaced += o.replaced;
        double zmax = -1;
        for (const auto& c : o.scores.candidates) zmax = std::max(zmax, c.rewrite_score);
        CHECK(o.replaced == (zmax > o.scores.z0));
        CHECK(same_structure(next.working_contexts[i], state.working_contexts[i]));
        if (o.pairs.rewrite) {
            double zmin = 2;
            for (const auto& c : o.scores.candidates) zmin = std::min(zmin, c.rewrite_score);
            CHECK(o.pairs.rewrite->chosen_score == zmax);
            CHECK(o.pairs.rewrite->rejected_score == zmin);
        }
    }
    CHECK(next.replacement_count == replaced);

    const auto rewrites = dpo::load_preferences(dir.path() / next.dataset_paths[0].rewrite);
    CHECK(rewrites.size() == next.dataset_paths[0].rewrite_pairs);
    for (const auto& r : rewrites) CHECK(r.round == 1);

    const auto loaded = read_checkpoint(dir.path());
    REQUIRE(loaded);
    CHECK(loaded->state == next);
    CHECK_FALSE(loaded->pending);
}

TEST_CASE("run_round: degenerate candidate sets skip the trainer") {
    Fixture f(3);
    mock::MockGeneratorFactory echo(11, nullptr, mock::RewriteStyle::Echo);
    BackendBundle bundle{echo, f.embedder, f.similarity, f.model,
                         [&](const std::string& s) { f.notices.push_back(s); }};
    TempDir dir;
    mock::MockTrainerHook trainer;
    const auto next = run_round(initial_state(f.data, "rw", "resp", 0), bundle, trainer, f.config, dir.path());
    CHECK(next.k == 1);
    CHECK(next.dataset_paths[0].rewrite_pairs == 0);
    CHECK(next.dataset_paths[0].response_pairs == 0);
    CHECK(read_file(dir.path() / next.dataset_paths[0].rewrite).empty());
    CHECK(trainer.requests().empty());
    CHECK(f.notices.size() == 2);
    CHECK(next.rewriter_model_id == "rw");
}

TEST_CASE("run_round: trainer failure leaves the pre-round checkpoint") {
    Fixture f(3);
    TempDir dir;
    mock::MockTrainerHook trainer;
    trainer.fail_on = ModelRole::Responder;
    const auto state = initial_state(f.data, "rw", "resp", 0);
    write_checkpoint(dir.path(), state);
    const std::string before = read_file(dir.path() / kCheckpointName);
    CHECK_THROWS_AS(run_round(state, f.bundle, trainer, f.config, dir.path()), BackendError);
    CHECK(read_file(dir.path() / kCheckpointName) == before);
    CHECK_FALSE(std::filesystem::exists(dir.path() / "round-1"));
}

TEST_CASE("run: deterministic, resumable, and idempotent") {
    Fixture f(4);
    f.config.rounds = 3;
    TempDir a, b;
    mock::MockTrainerHook ta, tb;
    const auto sa = run(f.data, f.bundle, ta, f.config, a.path(), "rw-v0", "resp-v0");
    const auto sb = run(f.data, f.bundle, tb, f.config, b.path(), "rw-v0", "resp-v0");
    CHECK(sa.k == 3);
    CHECK(sa.dataset_paths.size() == 3);
    CHECK(sa.dataset_paths[0].rewrite_pairs > 0);
    CHECK(sa.dataset_paths[0].response_pairs > 0);
    CHECK(sa.replacement_count > 0);
    CHECK(dir_digests(a.path()) == dir_digests(b.path()));
    CHECK(sa == sb);

    // Rerun over a finished directory is a no-op.
    mock::MockTrainerHook again;
    const auto before = dir_digests(a.path());
    CHECK(run(f.data, f.bundle, again, f.config, a.path(), "rw-v0", "resp-v0") == sa);
    CHECK(again.requests().empty());
    CHECK(dir_digests(a.path()) == before);

    // Stop at k = 2, then extend to 3.
    TempDir c;
    auto two = f.config;
    two.rounds = 2;
    mock::MockTrainerHook tc;
    const auto s2 = run(f.data, f.bundle, tc, two, c.path(), "rw-v0", "resp-v0");
    CHECK(s2.k == 2);
    const auto d1 = file_sha256(c.path() / s2.dataset_paths[0].rewrite);
    mock::MockTrainerHook tc2;
    const auto s3 = run(f.data, f.bundle, tc2, f.config, c.path(), "rw-v0", "resp-v0");
    CHECK(s3 == sa);
    CHECK(file_sha256(c.path() / s2.dataset_paths[0].rewrite) == d1);
    for (const auto& r : tc2.requests()) CHECK(r.round == 3);

    // Different inputs against the same directory are refused.
    auto other = f.config;
    other.seed = 2;
    mock::MockTrainerHook td;
    CHECK_THROWS_AS(run(f.data, f.bundle, td, other, a.path(), "rw-v0", "resp-v0"), ConfigError);
}

TEST_CASE("run: resumes an interrupted trainer phase and detects tampering") {
    Fixture f(3);
    f.config.rounds = 1;
    TempDir dir;
    mock::MockTrainerHook first;
    const auto done = run(f.data, f.bundle, first, f.config, dir.path(), "rw", "resp");

    // Recreate the checkpoint as it stood just before the trainer calls.
    auto pre = initial_state(f.data, "rw", "resp", f.config.seed);
    pre.fingerprint = done.fingerprint;
    nlohmann::json pending = checkpoint_json(done).at("dataset_paths")[0];
    pending = {{"round", 1},
               {"files", pending},
               {"replacement_count", done.replacement_count},
               {"working_contexts", checkpoint_json(done).at("working_contexts")}};
    write_checkpoint(dir.path(), pre, pending);
    mock::MockTrainerHook resumed;
    CHECK(run(f.data, f.bundle, resumed, f.config, dir.path(), "rw", "resp") == done);
    CHECK(resumed.requests().size() == first.requests().size());

    std::ofstream(dir.path() / done.dataset_paths[0].response, std::ios::app) << "tampered\n";
    mock::MockTrainerHook t3;
    CHECK_THROWS_AS(run(f.data, f.bundle, t3, f.config, dir.path(), "rw", "resp"), DataError);
}

TEST_CASE("warm_up trains both roles from teacher candidates") {
    Fixture f(3);
    TempDir dir;
    mock::MockGenerator teacher("teacher", 5, nullptr, mock::RewriteStyle::Varied);
    mock::MockTrainerHook trainer;
    const auto w = warm_up(f.data, teacher, f.bundle, trainer, f.config, dir.path(), "rw-v0", "resp-v0");
    CHECK(teacher.calls() > 0);
    CHECK(std::filesystem::exists(dir.path() / "warmup" / "rewrite.jsonl"));
    for (const auto& r : trainer.requests()) CHECK(r.round == 0);
    CHECK(w.rewriter_model_id == (w.files.rewrite_pairs ? "rw-v0+r0" : "rw-v0"));
    CHECK(w.responder_model_id == (w.files.response_pairs ? "resp-v0+r0" : "resp-v0"));
}

TEST_CASE("infer gate") {
    mock::MockEmbedder embedder(16, 1, mock::PlantedSignal{});
    const auto uniform = ar::ARModeld::zeros(16, 4, 2);  // t = 3 -> coherence 0.75
    const auto ctx = make_context({{"a", 0, "x y"}, {"b", 1, "y z"}, {"c", 2, "z w"}}, "a", 3);
    CountingRewriter rewriter([](const DialogueContext& c) {
        std::vector<std::string> texts;
        for (const auto& t : c.turns) texts.push_back("@" + t.text);
        return with_rewritten_texts(c, texts);
    });
    mock::MockGenerator responder("resp", 1);
    EvolveConfig cfg;

    auto r = infer(ctx, uniform, embedder, rewriter, responder, cfg);
    CHECK_FALSE(r.rewrote);
    CHECK(*r.coherence == doctest::Approx(0.75));
    CHECK(r.used == ctx);
    CHECK(rewriter.calls == 0);
    CHECK(responder.calls() == 1);

    cfg.phi = 0.8;
    r = infer(ctx, uniform, embedder, rewriter, responder, cfg);
    CHECK(r.rewrote);
    CHECK(r.used.turn(1).text == "@x y");
    CHECK(rewriter.calls == 1);

    cfg.phi = 0.0;
    CHECK_FALSE(infer(ctx, uniform, embedder, rewriter, responder, cfg).rewrote);

    cfg.phi = 1.0;
    const auto two = make_context({{"a", 0, "x"}, {"b", 1, "y"}}, "a", 2);
    CHECK(infer(two, uniform, embedder, rewriter, responder, cfg).rewrote);
    const auto single = make_context({{"a", 0, "x"}}, "b", 1);
    const auto rs = infer(single, uniform, embedder, rewriter, responder, cfg);
    CHECK_FALSE(rs.rewrote);
    CHECK_FALSE(rs.coherence);
    CHECK(rewriter.calls == 2);
}
