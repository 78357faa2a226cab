#include <doctest.h>

#include <atomic>
#include <cstdlib>
#include <sstream>
#include <thread>

#include "dialign/cli.hpp"
#include "dialign/digest.hpp"
#include "dialign/errors.hpp"
#include "test_support.hpp"

// After Eigen: resolv.h, pulled in by httplib, defines a `_res` macro.
#include <httplib.h>

using namespace dialign;
using dialign::testing::read_file;
using dialign::testing::TempDir;
using dialign::testing::write_file;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string out;
    std::string err;
};

Result cli(std::vector<std::string> args) {
    args.insert(args.begin(), "dialign");
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

const char* kTrainable = R"(
  "arhead": {"epochs": 10, "batch_size": 16, "learning_rate": 0.05, "hidden": 64, "projection": 32},
  "evolve": {"rounds": 2, "candidates": 2, "parallelism": 2}
)";

// Working directory with a config, a 1000-context training corpus, and a
// 20-context test corpus.
struct Workspace {
    TempDir dir;
    fs::path config = dir / "config.json";

    explicit Workspace(const std::string& extra = "", std::uint64_t seed = 3) {
        write_file(config, "{\"seed\": " + std::to_string(seed) +
                               ", \"paths\": {\"train\": \"train.jsonl\", \"test\": \"test.jsonl\", "
                               "\"checkpoint\": \"ar.json\", \"out_dir\": \"out\"}," +
                               kTrainable + extra + "}");
        REQUIRE(cli({"--config", config.string(), "--seed", "3", "synth", "--out",
                     (dir / "train.jsonl").string(), "--contexts", "1000"})
                    .code == 0);
        REQUIRE(cli({"--config", config.string(), "--seed", "4", "synth", "--out",
                     (dir / "test.jsonl").string(), "--contexts", "20"})
                    .code == 0);
    }

    Result run(std::vector<std::string> args) const {
        args.insert(args.begin(), {"--config", config.string()});
        return cli(std::move(args));
    }
    fs::path operator/(const std::string& name) const { return dir / name; }
};

double parse_after(const std::string& text, const std::string& key) {
    const auto pos = text.find(key);
    REQUIRE(pos != std::string::npos);
    return std::stod(text.substr(pos + key.size()));
}

std::vector<json> read_jsonl(const fs::path& path) {
    std::vector<json> out;
    std::istringstream in(read_file(path));
    std::string line;
    while (std::getline(in, line)) out.push_back(json::parse(line));
    return out;
}

}  // namespace

TEST_CASE("config decoding and validation") {
    TempDir dir;
    const json base = {{"evolve", {{"phi", 0.4}}}};
    const auto c = engine_config_from_json(base, dir.path());
    CHECK(c.evolve.phi == 0.4);
    CHECK(c.evolve.tau == 0.9);
    CHECK(c.evolve.sampler.n == 2);
    CHECK(c.evolve.rounds == 5);
    CHECK(c.arhead.epochs == 10);
    CHECK(c.arhead.batch_size == 128);
    CHECK(c.paths.out_dir == dir.path() / "out");

    CHECK_THROWS_AS(engine_config_from_json({{"evolve", {{"phi", 0.4}, {"rounds_typo", 2}}}}, dir.path()),
                    ConfigError);
    CHECK_THROWS_AS(engine_config_from_json({{"evolve", {{"phi", "high"}}}}, dir.path()), ConfigError);
    CHECK_THROWS_AS(engine_config_from_json(
                        {{"backends", {{"rewriter", {{"base_url", "http://x"}, {"api_key", "k"}}}}}},
                        dir.path()),
                    ConfigError);

    for (const json bad : {json{{"evolve", {{"phi", 1.5}}}}, json{{"evolve", {{"phi", -0.1}}}},
                           json{{"evolve", {{"tau", 0.0}}}}, json{{"sampler", {{"n", 0}, {"temperatures", json::array()}}}},
                           json{{"evolve", {{"rounds", 0}}}}, json{{"metrics", {"bleu9"}}},
                           json{{"backends", {{"mode", "grpc"}}}}}) {
        CHECK_THROWS_AS(engine_config_from_json(bad, dir.path()).check(), ConfigError);
    }
}

TEST_CASE("out-of-range values fail with exit 2 before any backend call") {
    std::atomic<int> hits{0};
    httplib::Server server;
    server.Post(R"(/v1/.*)", [&](const httplib::Request&, httplib::Response& res) {
        ++hits;
        res.status = 500;
    });
    const int port = server.bind_to_any_port("127.0.0.1");
    std::thread worker([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    TempDir dir;
    const std::string url = "http://127.0.0.1:" + std::to_string(port) + "/v1";
    write_file(dir / "c.json", json{{"backends",
                                     {{"mode", "http"},
                                      {"embedder", {{"base_url", url}, {"model", "e"}, {"dim", 4}}},
                                      {"rewriter", {{"base_url", url}, {"model", "r"}}},
                                      {"responder", {{"base_url", url}, {"model", "s"}}}}}}
                                   .dump());
    write_file(dir / "d.jsonl",
               to_json(dialign::testing::make_context({{"a", 0, "hi"}, {"b", 1, "yo"}}, "a", 2)).dump() + "\n");
    const std::string cfg = (dir / "c.json").string();
    const std::string data = (dir / "d.jsonl").string();

    for (const std::vector<std::string> flags :
         {std::vector<std::string>{"--phi", "1.5"}, {"--phi", "-1"}, {"--tau", "0"}, {"--tau", "-2"},
          {"--rounds", "0"}, {"--candidates", "1"}, {"--lambda", "1.2"}}) {
        std::vector<std::string> args{"--config", cfg};
        args.insert(args.end(), flags.begin(), flags.end());
        args.insert(args.end(), {"train-ar", "--data", data});
        const auto r = cli(args);
        CHECK(r.code == kExitConfig);
        CHECK(r.err.find("validate config") != std::string::npos);
    }
    CHECK(hits == 0);

    // With a valid config the same command reaches the backend and fails there.
    auto fast = json::parse(read_file(dir / "c.json"));
    fast["backends"]["embedder"]["max_retries"] = 0;
    write_file(dir / "c.json", fast.dump());
    const auto r = cli({"--config", cfg, "train-ar", "--data", data});
    CHECK(r.code == kExitBackend);
    CHECK(hits == 1);
    server.stop();
    worker.join();
}

TEST_CASE("exit codes name the failing stage") {
    Workspace ws;
    auto r = ws.run({"train-ar", "--data", (ws / "missing.jsonl").string()});
    CHECK(r.code == kExitData);
    CHECK(r.err.find("missing.jsonl") != std::string::npos);
    CHECK(r.err.find("load dataset") != std::string::npos);

    auto dim = json::parse(read_file(ws.config));
    dim["arhead"]["input_dim"] = 12;
    write_file(ws / "dim.json", dim.dump());
    r = cli({"--config", (ws / "dim.json").string(), "train-ar"});
    CHECK(r.code == kExitBackend);
    CHECK(r.err.find("dimension") != std::string::npos);

    r = ws.run({"score", "--checkpoint", (ws / "nope.json").string()});
    CHECK(r.code == kExitData);
    CHECK(r.err.find("checkpoint") != std::string::npos);

    r = cli({"--config", (ws / "absent.json").string(), "score"});
    CHECK(r.code == kExitConfig);
    r = cli({"frobnicate"});
    CHECK(r.code == kExitConfig);
    r = cli({"--help"});
    CHECK(r.code == kExitOk);
}

TEST_CASE("train-ar on the planted corpus, then score") {
    Workspace ws;
    auto r = ws.run({"train-ar"});
    REQUIRE(r.code == 0);
    CHECK(parse_after(r.out, "validation accuracy ") >= 0.95);
    CHECK(r.out.find("epoch 10 loss") != std::string::npos);
    CHECK(fs::exists(ws / "ar.json"));

    r = ws.run({"score"});
    REQUIRE(r.code == 0);
    const auto lines = read_jsonl(ws / "out" / "scores-probability.jsonl");
    REQUIRE(lines.size() == 20);
    double sum = 0;
    for (const auto& l : lines) {
        CHECK(l.at("proxy_mode") == "probability");
        sum += l.at("coherence").get<double>();
    }
    CHECK(parse_after(r.out, "mean coherence ") == doctest::Approx(sum / 20).epsilon(1e-6));
    CHECK(lines[0].at("context_id") == 1);

    r = ws.run({"--proxy", "accuracy", "score"});
    REQUIRE(r.code == 0);
    for (const auto& l : read_jsonl(ws / "out" / "scores-accuracy.jsonl")) {
        const double c = l.at("coherence").get<double>();
        CHECK(l.at("proxy_mode") == "accuracy");
        CHECK(c >= 0.0);
        CHECK(c <= 1.0);
    }

    // Two-turn contexts have a single candidate addressee.
    std::string two;
    for (int i = 0; i < 5; ++i) {
        two += to_json(dialign::testing::make_context({{"a", 0, "q" + std::to_string(i)}, {"b", 1, "r"}}, "a", 2))
                   .dump() + "\n";
    }
    write_file(ws / "two.jsonl", two);
    r = ws.run({"score", "--data", (ws / "two.jsonl").string(), "--out", (ws / "two-scores.jsonl").string()});
    REQUIRE(r.code == 0);
    for (const auto& l : read_jsonl(ws / "two-scores.jsonl")) CHECK(l.at("coherence") == 1.0);
}

TEST_CASE("commands are idempotent unless forced") {
    Workspace ws;
    REQUIRE(ws.run({"train-ar"}).code == 0);
    const auto before = fs::last_write_time(ws / "ar.json");
    const auto digest = file_sha256(ws / "ar.json");
    auto r = ws.run({"train-ar"});
    CHECK(r.code == 0);
    CHECK(r.out.find("up to date") != std::string::npos);
    CHECK(fs::last_write_time(ws / "ar.json") == before);

    r = ws.run({"--force", "train-ar"});
    CHECK(r.code == 0);
    CHECK(r.out.find("epoch 1 loss") != std::string::npos);
    CHECK(file_sha256(ws / "ar.json") == digest);

    REQUIRE(ws.run({"score"}).code == 0);
    CHECK(ws.run({"score"}).out.find("up to date") != std::string::npos);
    // A changed input invalidates the guard.
    write_file(ws / "test.jsonl", read_file(ws / "test.jsonl").substr(0, read_file(ws / "test.jsonl").find('\n') + 1));
    r = ws.run({"score"});
    CHECK(r.out.find("over 1 contexts") != std::string::npos);
    // So does a tampered output.
    write_file(ws / "out" / "scores-probability.jsonl", "junk\n");
    r = ws.run({"score"});
    CHECK(r.out.find("up to date") == std::string::npos);
    CHECK(read_jsonl(ws / "out" / "scores-probability.jsonl").size() == 1);
}

TEST_CASE("the seed determines every mock-backed output") {
    Workspace a, b;
    for (auto* ws : {&a, &b}) {
        REQUIRE(ws->run({"train-ar"}).code == 0);
        REQUIRE(ws->run({"sample", "--data", ((*ws) / "test.jsonl").string()}).code == 0);
        REQUIRE(ws->run({"--phi", "1", "infer"}).code == 0);
    }
    for (const char* f : {"ar.json", "out/sample/candidates.jsonl", "out/sample/trees.jsonl", "out/predictions.jsonl"}) {
        CHECK(read_file(a / f) == read_file(b / f));
    }
    REQUIRE(b.run({"--seed", "99", "--force", "sample", "--data", (b / "test.jsonl").string()}).code == 0);
    CHECK(read_file(a / "out/sample/trees.jsonl") != read_file(b / "out/sample/trees.jsonl"));
}

TEST_CASE("sample writes candidates and trees") {
    Workspace ws;
    const auto r = ws.run({"sample", "--data", (ws / "test.jsonl").string()});
    REQUIRE(r.code == 0);
    const auto cands = read_jsonl(ws / "out/sample/candidates.jsonl");
    CHECK(cands.size() == 20);
    for (const auto& c : cands) {
        CHECK(c.at("candidates").size() >= 1);
        CHECK(c.at("candidates").size() <= 8);
        for (const auto& h : c.at("candidates")) {
            CHECK(h.at("turns").size() == c.at("original").at("turns").size());
        }
    }
    std::size_t roots = 0;
    for (const auto& n : read_jsonl(ws / "out/sample/trees.jsonl")) {
        roots += n.at("parent_id").is_null();
        for (const char* k : {"context_id", "id", "layer", "text", "similarity", "pruned", "fallback"}) {
            CHECK(n.contains(k));
        }
    }
    CHECK(roots == 20);
}

TEST_CASE("infer gate boundaries and eval identity") {
    Workspace ws;
    REQUIRE(ws.run({"train-ar"}).code == 0);
    auto r = ws.run({"--phi", "0", "infer", "--out", (ws / "p0.jsonl").string()});
    REQUIRE(r.code == 0);
    for (const auto& l : read_jsonl(ws / "p0.jsonl")) CHECK(l.at("rewrote") == false);

    r = ws.run({"--phi", "1", "infer", "--out", (ws / "p1.jsonl").string()});
    REQUIRE(r.code == 0);
    for (const auto& l : read_jsonl(ws / "p1.jsonl")) {
        CHECK(l.at("rewrote") == !l.at("coherence").is_null());
        CHECK(l.at("response").get<std::string>().size() > 0);
    }

    std::string gold;
    for (const auto& l : read_jsonl(ws / "test.jsonl")) {
        static int id = 0;
        gold += json{{"context_id", ++id}, {"response", l.at("gold_response")}}.dump() + "\n";
    }
    write_file(ws / "gold-preds.jsonl", gold);
    r = ws.run({"eval", "--predictions", (ws / "gold-preds.jsonl").string(), "--out", (ws / "m.json").string()});
    REQUIRE(r.code == 0);
    const auto m = json::parse(read_file(ws / "m.json"));
    CHECK(m.at("bleu1") == 1.0);
    CHECK(m.at("rouge_l") == 1.0);
    CHECK(m.at("meteor").get<double>() > 0.0);
    CHECK(m.at("count") == 20);
    CHECK(r.out.find("bleu1     1.000000") != std::string::npos);

    write_file(ws / "bad-preds.jsonl", R"({"context_id": 999, "response": "x"})" "\n");
    CHECK(ws.run({"eval", "--predictions", (ws / "bad-preds.jsonl").string()}).code == kExitData);
}

TEST_CASE("evolve with mock backends: two rounds, then a no-op rerun") {
    Workspace ws;
    REQUIRE(ws.run({"train-ar"}).code == 0);
    REQUIRE(ws.run({"--seed", "5", "synth", "--out", (ws / "small.jsonl").string(), "--contexts", "12"}).code == 0);
    auto r = ws.run({"build-prefs", "--data", (ws / "small.jsonl").string()});
    REQUIRE(r.code == 0);
    CHECK(fs::exists(ws / "out/warmup/rewrite.jsonl"));
    CHECK(fs::exists(ws / "out/warmup/response.jsonl"));
    const auto models = json::parse(read_file(ws / "out/warmup/models.json"));
    CHECK(models.at("rewriter_model_id") == "rewriter-v0+r0");

    const std::vector<std::string> args{"evolve", "--data", (ws / "small.jsonl").string(), "--warm-start",
                                        (ws / "out/warmup/models.json").string()};
    r = ws.run(args);
    REQUIRE(r.code == 0);
    for (const char* f : {"round-1/rewrite.jsonl", "round-1/response.jsonl", "round-2/rewrite.jsonl",
                          "round-2/response.jsonl", "checkpoint.json", "contexts.jsonl"}) {
        CHECK(fs::exists(ws / "out/run" / f));
    }
    CHECK(r.out.find("rounds 2") != std::string::npos);
    CHECK(r.out.find("responder model responder-v0+r0+r1+r2") != std::string::npos);

    std::map<std::string, std::pair<std::string, fs::file_time_type>> snapshot;
    for (const auto& e : fs::recursive_directory_iterator(ws / "out/run")) {
        if (e.is_regular_file()) snapshot[e.path().string()] = {file_sha256(e.path()), e.last_write_time()};
    }
    r = ws.run(args);
    REQUIRE(r.code == 0);
    CHECK(r.err.find("round 1 complete") == std::string::npos);
    std::size_t files = 0;
    for (const auto& e : fs::recursive_directory_iterator(ws / "out/run")) {
        if (!e.is_regular_file()) continue;
        ++files;
        REQUIRE(snapshot.count(e.path().string()));
        CHECK(snapshot[e.path().string()].first == file_sha256(e.path()));
        CHECK(snapshot[e.path().string()].second == e.last_write_time());
    }
    CHECK(files == snapshot.size());

    // A different config against the same run directory is refused...
    r = ws.run({"--rounds", "3", "evolve", "--data", (ws / "small.jsonl").string()});
    CHECK(r.code == kExitConfig);
    // ...unless forced, which starts over.
    r = ws.run({"--rounds", "3", "--force", "evolve", "--data", (ws / "small.jsonl").string()});
    CHECK(r.code == 0);
    CHECK(fs::exists(ws / "out/run/round-3/rewrite.jsonl"));

    // infer can pick up the evolved model ids.
    r = ws.run({"--phi", "1", "infer", "--run-dir", (ws / "out/run").string()});
    CHECK(r.code == 0);
}

TEST_CASE("http backends: credentials stay out of outputs and logs") {
    const std::string secret = "sk-live-0123456789abcdef";
    ::setenv("DIALIGN_CLI_TEST_KEY", secret.c_str(), 1);
    std::atomic<int> unauthorized{0}, requests{0};
    httplib::Server server;
    auto authorized = [&](const httplib::Request& req) {
        ++requests;
        if (req.get_header_value("Authorization") != "Bearer " + secret) {
            ++unauthorized;
            return false;
        }
        return true;
    };
    server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
        if (!authorized(req)) {
            res.status = 401;
            return;
        }
        const auto body = json::parse(req.body);
        const std::string prompt = body.at("messages")[0].at("content");
        // Echo the last non-empty prompt line so rewrites stay similar.
        std::string last;
        std::istringstream in(prompt);
        for (std::string l; std::getline(in, l);) {
            if (!l.empty() && l.find(':') != std::string::npos) last = l.substr(l.find(':') + 1);
        }
        res.set_content(json{{"choices", {{{"message", {{"content", last + " ok"}}}}}}}.dump(), "application/json");
    });
    server.Post("/v1/embeddings", [&](const httplib::Request& req, httplib::Response& res) {
        if (!authorized(req)) {
            res.status = 401;
            return;
        }
        const auto body = json::parse(req.body);
        json data = json::array();
        int i = 0;
        for (const auto& s : body.at("input")) {
            const auto h = sha256_u64(s.get<std::string>());
            std::vector<double> v(16);
            for (int k = 0; k < 16; ++k) v[k] = static_cast<double>((h >> (k * 4)) & 15) / 15.0 - 0.5;
            data.push_back({{"index", i++}, {"embedding", v}});
        }
        res.set_content(json{{"data", data}}.dump(), "application/json");
    });
    const int port = server.bind_to_any_port("127.0.0.1");
    std::thread worker([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    Workspace ws;
    const std::string url = "http://127.0.0.1:" + std::to_string(port) + "/v1";
    auto cfg = json::parse(read_file(ws.config));
    auto ep = [&](const char* model) {
        return json{{"base_url", url}, {"model", model}, {"api_key_env", "DIALIGN_CLI_TEST_KEY"}, {"backoff_ms", 1}};
    };
    cfg["backends"] = {{"mode", "http"},
                       {"rewriter", ep("rw")},
                       {"responder", ep("resp")},
                       {"embedder", ep("emb")},
                       {"similarity", ep("emb")}};
    cfg["backends"]["embedder"]["dim"] = 16;
    cfg["arhead"]["epochs"] = 1;
    write_file(ws.config, cfg.dump());
    REQUIRE(ws.run({"synth", "--out", (ws / "train.jsonl").string(), "--contexts", "30"}).code == 0);

    std::string logs;
    for (const std::vector<std::string>& args :
         {std::vector<std::string>{"train-ar"}, {"score"}, {"sample", "--data", (ws / "test.jsonl").string()},
          {"--phi", "1", "infer"}}) {
        const auto r = ws.run(args);
        CHECK_MESSAGE(r.code == 0, r.err);
        logs += r.out + r.err;
    }
    CHECK(requests > 0);
    CHECK(unauthorized == 0);

    // A rejected key surfaces as a backend error without echoing the key.
    ::setenv("DIALIGN_CLI_TEST_KEY", (secret + "-revoked").c_str(), 1);
    const auto denied = ws.run({"--force", "score"});
    CHECK(denied.code == kExitBackend);
    CHECK(denied.err.find("401") != std::string::npos);
    logs += denied.out + denied.err;
    server.stop();
    worker.join();

    CHECK(logs.find("sk-live") == std::string::npos);
    for (const auto& e : fs::recursive_directory_iterator(ws.dir.path())) {
        if (e.is_regular_file()) CHECK_MESSAGE(read_file(e.path()).find("sk-live") == std::string::npos, e.path());
    }
}
