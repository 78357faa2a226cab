#include "dialign/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <random>
#include <set>
#include <sstream>

#include "dialign/corpus.hpp"
#include "dialign/digest.hpp"
#include "dialign/errors.hpp"
#include "dialign/metrics.hpp"
#include "dialign/sampler.hpp"
#include "dialign/synthetic.hpp"

namespace dialign {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Config decoding

// Reads one JSON object, remembering which keys were consumed so that any
// leftover key can be reported as unknown.
class Section {
public:
    Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
        if (!j_.is_object()) throw ConfigError(name_ + ": expected an object");
    }

    bool has(const std::string& key) {
        seen_.insert(key);
        return j_.contains(key) && !j_.at(key).is_null();
    }

    template <typename T>
    void get(const std::string& key, T& out) {
        if (!has(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception&) {
            throw ConfigError(name_ + "." + key + ": wrong type");
        }
    }

    Section child(const std::string& key) {
        seen_.insert(key);
        return Section(j_.at(key), name_ + "." + key);
    }

    void path(const std::string& key, const fs::path& base, fs::path& out) {
        std::string s;
        get(key, s);
        if (has(key)) out = resolve(base, s);
    }
    void path(const std::string& key, const fs::path& base, std::optional<fs::path>& out) {
        fs::path p;
        path(key, base, p);
        if (has(key)) out = p;
    }

    void done() const {
        for (const auto& [key, value] : j_.items()) {
            if (!seen_.count(key)) throw ConfigError(name_ + ": unknown key '" + key + "'");
        }
    }

    static fs::path resolve(const fs::path& base, const fs::path& p) {
        if (p.empty()) throw ConfigError("empty path in config");
        return p.is_absolute() ? p : (base / p).lexically_normal();
    }

private:
    const json& j_;
    std::string name_;
    std::set<std::string> seen_;
};

BackendEndpoint endpoint_from_json(Section s, int* dim = nullptr) {
    if (s.has("api_key")) {
        throw ConfigError("API keys must not appear in config files; set api_key_env to the name "
                          "of an environment variable instead");
    }
    BackendEndpoint e;
    s.get("base_url", e.base_url);
    s.get("model", e.model);
    s.get("api_key_env", e.api_key_env);
    std::int64_t ms = e.timeout.count();
    s.get("timeout_ms", ms);
    e.timeout = std::chrono::milliseconds(ms);
    ms = e.backoff_base.count();
    s.get("backoff_ms", ms);
    e.backoff_base = std::chrono::milliseconds(ms);
    s.get("max_retries", e.max_retries);
    if (dim) s.get("dim", *dim);
    s.done();
    return e;
}

json endpoint_json(const BackendEndpoint& e) {
    return {{"base_url", e.base_url},
            {"model", e.model},
            {"api_key_env", e.api_key_env},
            {"timeout_ms", e.timeout.count()},
            {"backoff_ms", e.backoff_base.count()},
            {"max_retries", e.max_retries}};
}

mock::RewriteStyle parse_style(const std::string& s) {
    if (s == "varied") return mock::RewriteStyle::Varied;
    if (s == "strengthen") return mock::RewriteStyle::Strengthen;
    if (s == "echo") return mock::RewriteStyle::Echo;
    throw ConfigError("backends.mock.style: expected varied, strengthen, or echo");
}

const char* style_name(mock::RewriteStyle s) {
    switch (s) {
        case mock::RewriteStyle::Varied: return "varied";
        case mock::RewriteStyle::Strengthen: return "strengthen";
        case mock::RewriteStyle::Echo: return "echo";
    }
    return "varied";
}

const std::vector<std::string> kMetricNames{"bleu1", "bleu2", "bleu3", "bleu4",
                                            "meteor", "rouge_l", "dist1", "dist2"};

// ---------------------------------------------------------------------------
// Backends

// Routes evolved model ids to the responder endpoint when they descend from
// the responder's base id, and to the rewriter endpoint otherwise.
class RoutingFactory final : public GeneratorFactory {
public:
    RoutingFactory(std::unique_ptr<GeneratorFactory> rewriter,
                   std::unique_ptr<GeneratorFactory> responder, std::string responder_base)
        : rewriter_(std::move(rewriter)), responder_(std::move(responder)),
          responder_base_(std::move(responder_base)) {}

    std::shared_ptr<TextGenerator> for_model(const std::string& id) override {
        if (responder_ && !responder_base_.empty() && id.rfind(responder_base_, 0) == 0) {
            return responder_->for_model(id);
        }
        if (rewriter_) return rewriter_->for_model(id);
        if (responder_) return responder_->for_model(id);
        throw ConfigError("backends: no generator endpoint is configured");
    }

private:
    std::unique_ptr<GeneratorFactory> rewriter_;
    std::unique_ptr<GeneratorFactory> responder_;
    std::string responder_base_;
};

// Fails with a backend error when the embedder's width differs from what the
// AR head expects.
class CheckedEmbedder final : public Embedder {
public:
    CheckedEmbedder(Embedder& inner, int expected) : inner_(inner), expected_(expected) {}

    Eigen::MatrixXd embed_turns(const DialogueContext& context) override {
        Eigen::MatrixXd m = inner_.embed_turns(context);
        if (m.cols() != expected_) {
            throw BackendError(BackendErrorKind::DimensionDrift,
                               "embedder returned dimension " + std::to_string(m.cols()) +
                                   " but the AR head expects " + std::to_string(expected_));
        }
        return m;
    }
    int dim() const override { return expected_; }

private:
    Embedder& inner_;
    int expected_;
};

template <typename T>
T& need(const std::unique_ptr<T>& p, const char* what) {
    if (!p) throw ConfigError(std::string("backends.") + what + " is not configured");
    return *p;
}

// ---------------------------------------------------------------------------
// Files

void write_atomic(const fs::path& path, const std::string& content) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write '" + tmp.string() + "'");
        out << content;
        if (!out.flush()) throw DataError("cannot write '" + tmp.string() + "'");
    }
    fs::rename(tmp, path);
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Leaves the file (and its mtime) alone when the content is unchanged.
void write_if_changed(const fs::path& path, const std::string& content) {
    if (fs::exists(path) && read_text(path) == content) return;
    write_atomic(path, content);
}

// Content-digest guard: a command is skipped when its inputs digest matches
// the stamp and every recorded output still has its recorded digest.
class OutputGuard {
public:
    OutputGuard(fs::path stamp, const json& inputs)
        : stamp_(std::move(stamp)), digest_(sha256_hex(inputs.dump())) {}

    bool up_to_date() const {
        if (!fs::exists(stamp_)) return false;
        json s;
        try {
            s = json::parse(read_text(stamp_));
        } catch (const json::exception&) {
            return false;
        }
        if (s.value("digest", "") != digest_ || !s.contains("outputs")) return false;
        for (const auto& [name, sha] : s.at("outputs").items()) {
            const fs::path p = stamp_.parent_path() / name;
            if (!fs::exists(p) || file_sha256(p) != sha.get<std::string>()) return false;
        }
        return true;
    }

    void commit(const std::vector<fs::path>& outputs) const {
        json files = json::object();
        for (const auto& p : outputs) {
            files[fs::relative(p, stamp_.parent_path()).generic_string()] = file_sha256(p);
        }
        write_atomic(stamp_, json{{"digest", digest_}, {"outputs", files}}.dump(2) + "\n");
    }

private:
    fs::path stamp_;
    std::string digest_;
};

fs::path stamp_for_file(const fs::path& output) {
    return output.parent_path() / ("." + output.filename().string() + ".stamp");
}

// ---------------------------------------------------------------------------
// Command plumbing

struct Session {
    EngineConfig config;
    std::ostream& out;
    std::ostream& err;
    std::string stage = "parse arguments";
    bool force = false;
    ar::CoherenceProxy proxy = ar::CoherenceProxy::Probability;

    void at(std::string s) { stage = std::move(s); }
};

fs::path pick_dataset(const std::string& flag, const std::optional<fs::path>& fallback,
                      const char* key) {
    if (!flag.empty()) return flag;
    if (fallback) return *fallback;
    throw ConfigError(std::string("no dataset given: pass --data or set paths.") + key);
}

Dataset load_dataset(Session& s, const fs::path& path) {
    s.at("load dataset");
    Dataset d = load_jsonl(path);
    for (const auto& issue : d.issues) {
        s.err << "warning: " << path.string() << ":" << issue.line << ": " << issue.field << ": "
              << issue.message << "\n";
    }
    return d;
}

json guard_inputs(const Session& s, const std::string& command, std::vector<fs::path> files,
                  json options) {
    json digests = json::object();
    for (const auto& f : files) digests[f.string()] = file_sha256(f);
    return {{"command", command},
            {"config", to_json(s.config)},
            {"inputs", digests},
            {"options", std::move(options)}};
}

std::string fmt(double v, int precision = 6) {
    std::ostringstream ss;
    ss << std::fixed << std::setprecision(precision) << v;
    return ss.str();
}

void require_file(Session& s, const fs::path& path, const char* stage) {
    s.at(stage);
    if (!fs::is_regular_file(path)) throw DataError("no such file '" + path.string() + "'");
}

int up_to_date_notice(Session& s, const std::string& command) {
    s.out << command << ": outputs up to date, nothing to do (pass --force to rerun)\n";
    return kExitOk;
}

// -- train-ar ---------------------------------------------------------------

struct TrainArArgs {
    std::string data, valid, out;
};

int cmd_train_ar(Session& s, const TrainArArgs& a) {
    auto& cfg = s.config;
    const fs::path data = pick_dataset(a.data, cfg.paths.train, "train");
    std::optional<fs::path> valid =
        a.valid.empty() ? cfg.paths.valid : std::optional<fs::path>(a.valid);
    const fs::path out = a.out.empty() ? cfg.paths.checkpoint : fs::path(a.out);

    s.at("load dataset");
    std::vector<fs::path> inputs{data};
    if (valid) inputs.push_back(*valid);
    const OutputGuard guard(stamp_for_file(out), guard_inputs(s, "train-ar", inputs, {}));
    if (!s.force && guard.up_to_date()) return up_to_date_notice(s, "train-ar");

    const Dataset train_set = load_dataset(s, data);
    if (train_set.contexts.empty()) throw DataError("no valid contexts in '" + data.string() + "'");
    std::optional<Dataset> valid_set;
    if (valid) valid_set = load_dataset(s, *valid);

    s.at("embed contexts");
    Backends b = make_backends(cfg);
    Embedder& raw = need(b.embedder, "embedder");
    CheckedEmbedder embedder(raw, cfg.input_dim.value_or(raw.dim()));
    std::vector<ar::LabeledContext<double>> labeled;
    for (const auto& c : train_set.contexts) labeled.push_back(ar::label(c, embedder));
    std::vector<ar::LabeledContext<double>> held;
    if (valid_set) {
        for (const auto& c : valid_set->contexts) held.push_back(ar::label(c, embedder));
    } else if (labeled.size() >= 2 && cfg.holdout > 0.0) {
        std::vector<std::size_t> order(labeled.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::mt19937_64 rng(cfg.seed);
        std::shuffle(order.begin(), order.end(), rng);
        const auto n_held = std::clamp<std::size_t>(
            static_cast<std::size_t>(std::llround(cfg.holdout * static_cast<double>(order.size()))),
            1, order.size() - 1);
        std::vector<ar::LabeledContext<double>> kept;
        for (std::size_t i = 0; i < order.size(); ++i) {
            (i < order.size() - n_held ? kept : held).push_back(std::move(labeled[order[i]]));
        }
        labeled = std::move(kept);
    }

    s.at("train");
    const auto result = ar::train(std::span<const ar::LabeledContext<double>>(labeled), cfg.arhead);
    for (std::size_t e = 0; e < result.epoch_losses.size(); ++e) {
        s.out << "epoch " << e + 1 << " loss " << fmt(result.epoch_losses[e]) << "\n";
    }
    if (held.empty()) {
        s.out << "validation accuracy n/a (no held-out contexts)\n";
    } else {
        const double acc =
            ar::accuracy(result.model, std::span<const ar::LabeledContext<double>>(held));
        s.out << "validation accuracy " << fmt(acc) << " (" << held.size() << " contexts)\n";
    }

    s.at("write checkpoint");
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    ar::save_model(result.model, out);
    guard.commit({out});
    s.out << "checkpoint " << out.string() << "\n";
    return kExitOk;
}

// -- score --------------------------------------------------------------------

struct ScoreArgs {
    std::string data, checkpoint, out;
};

int cmd_score(Session& s, const ScoreArgs& a) {
    auto& cfg = s.config;
    const fs::path data = pick_dataset(a.data, cfg.paths.test, "test");
    const fs::path ckpt = a.checkpoint.empty() ? cfg.paths.checkpoint : fs::path(a.checkpoint);
    const fs::path out = a.out.empty()
                             ? cfg.paths.out_dir / (std::string("scores-") + ar::to_string(s.proxy) + ".jsonl")
                             : fs::path(a.out);

    require_file(s, ckpt, "load checkpoint");
    s.at("load dataset");
    const OutputGuard guard(stamp_for_file(out),
                            guard_inputs(s, "score", {data, ckpt}, {{"proxy", ar::to_string(s.proxy)}}));
    if (!s.force && guard.up_to_date()) return up_to_date_notice(s, "score");
    const Dataset d = load_dataset(s, data);

    s.at("load checkpoint");
    const ar::ARModeld model = ar::load_model(ckpt);

    s.at("score contexts");
    Backends b = make_backends(cfg);
    CheckedEmbedder embedder(need(b.embedder, "embedder"), model.input_dim());
    std::string lines;
    double sum = 0.0;
    for (std::size_t i = 0; i < d.contexts.size(); ++i) {
        const double c = ar::coherence(d.contexts[i], model, embedder, s.proxy);
        sum += c;
        lines += json{{"context_id", d.line_numbers[i]},
                      {"coherence", c},
                      {"proxy_mode", ar::to_string(s.proxy)}}.dump() + "\n";
    }

    s.at("write report");
    write_atomic(out, lines);
    guard.commit({out});
    if (d.contexts.empty()) {
        s.out << "mean coherence n/a (0 contexts)\n";
    } else {
        s.out << "mean coherence " << fmt(sum / static_cast<double>(d.contexts.size()))
              << " over " << d.contexts.size() << " contexts (proxy " << ar::to_string(s.proxy)
              << ")\n";
    }
    s.out << "report " << out.string() << "\n";
    return kExitOk;
}

// -- sample -------------------------------------------------------------------

struct SampleArgs {
    std::string data, out;
};

int cmd_sample(Session& s, const SampleArgs& a) {
    auto& cfg = s.config;
    const fs::path data = pick_dataset(a.data, cfg.paths.train, "train");
    const fs::path dir = a.out.empty() ? cfg.paths.out_dir / "sample" : fs::path(a.out);
    const fs::path cand_path = dir / "candidates.jsonl";
    const fs::path tree_path = dir / "trees.jsonl";

    s.at("load dataset");
    const OutputGuard guard(dir / ".sample.stamp", guard_inputs(s, "sample", {data}, {}));
    if (!s.force && guard.up_to_date()) return up_to_date_notice(s, "sample");
    const Dataset d = load_dataset(s, data);

    s.at("sample rewrites");
    Backends b = make_backends(cfg);
    auto generator = need(b.generators, "rewriter").for_model(b.rewriter_id);
    SimilarityScorer& sim = need(b.similarity, "similarity");
    std::string cand_lines, tree_lines;
    std::size_t total = 0;
    for (std::size_t i = 0; i < d.contexts.size(); ++i) {
        SamplerConfig sc = cfg.evolve.sampler;
        sc.seed = sha256_u64(std::to_string(cfg.seed) + "|sample|" + std::to_string(i));
        const auto result = rewrite_context(d.contexts[i], *generator, sim, sc);
        json cands = json::array();
        for (const auto& c : result.contexts) cands.push_back(to_json(c));
        total += result.contexts.size();
        cand_lines += json{{"context_id", d.line_numbers[i]},
                           {"original", to_json(d.contexts[i])},
                           {"candidates", cands}}.dump() + "\n";
        for (const auto& node : result.tree.nodes) {
            json line = result.tree.node_json(node);
            line["context_id"] = d.line_numbers[i];
            tree_lines += line.dump() + "\n";
        }
    }

    s.at("write samples");
    write_atomic(cand_path, cand_lines);
    write_atomic(tree_path, tree_lines);
    guard.commit({cand_path, tree_path});
    s.out << "sampled " << total << " candidate contexts for " << d.contexts.size()
          << " contexts\n"
          << "candidates " << cand_path.string() << "\ntrees " << tree_path.string() << "\n";
    return kExitOk;
}

// -- build-prefs (warm-up) ----------------------------------------------------

struct BuildPrefsArgs {
    std::string data, checkpoint, out;
};

int cmd_build_prefs(Session& s, const BuildPrefsArgs& a) {
    auto& cfg = s.config;
    const fs::path data = pick_dataset(a.data, cfg.paths.train, "train");
    const fs::path ckpt = a.checkpoint.empty() ? cfg.paths.checkpoint : fs::path(a.checkpoint);
    const fs::path dir = a.out.empty() ? cfg.paths.out_dir : fs::path(a.out);
    const fs::path models_path = dir / "warmup" / "models.json";

    require_file(s, ckpt, "load checkpoint");
    s.at("load dataset");
    const OutputGuard guard(dir / "warmup" / ".build-prefs.stamp",
                            guard_inputs(s, "build-prefs", {data, ckpt}, {}));
    if (!s.force && guard.up_to_date()) return up_to_date_notice(s, "build-prefs");
    const Dataset d = load_dataset(s, data);

    s.at("load checkpoint");
    const ar::ARModeld model = ar::load_model(ckpt);

    s.at("warm-up");
    Backends b = make_backends(cfg);
    if (!b.teacher) throw ConfigError("backends.teacher is not configured");
    CheckedEmbedder embedder(need(b.embedder, "embedder"), model.input_dim());
    BackendBundle bundle{need(b.generators, "rewriter"), embedder, need(b.similarity, "similarity"),
                         model, [&](const std::string& m) { s.err << "notice: " << m << "\n"; }};
    const auto w = warm_up(d, *b.teacher, bundle, need(b.trainer, "trainer"), cfg.evolve, dir,
                           b.rewriter_id, b.responder_id);

    s.at("write outputs");
    write_atomic(models_path, json{{"rewriter_model_id", w.rewriter_model_id},
                                   {"responder_model_id", w.responder_model_id}}.dump(2) + "\n");
    guard.commit({dir / w.files.rewrite, dir / w.files.response, models_path});
    s.out << "rewrite pairs " << w.files.rewrite_pairs << " -> " << (dir / w.files.rewrite).string()
          << "\nresponse pairs " << w.files.response_pairs << " -> "
          << (dir / w.files.response).string() << "\nrewriter model " << w.rewriter_model_id
          << "\nresponder model " << w.responder_model_id << "\n";
    return kExitOk;
}

// -- evolve -------------------------------------------------------------------

struct EvolveArgs {
    std::string data, checkpoint, run_dir, warm_start;
};

std::pair<std::string, std::string> read_models_file(const fs::path& path) {
    try {
        const json j = json::parse(read_text(path));
        return {j.at("rewriter_model_id").get<std::string>(),
                j.at("responder_model_id").get<std::string>()};
    } catch (const json::exception& e) {
        throw DataError("malformed models file '" + path.string() + "': " + e.what());
    }
}

void clear_run_dir(const fs::path& run_dir) {
    if (!fs::exists(run_dir)) return;
    fs::remove(run_dir / kCheckpointName);
    fs::remove(run_dir / "contexts.jsonl");
    for (const auto& entry : fs::directory_iterator(run_dir)) {
        if (entry.is_directory() && entry.path().filename().string().rfind("round-", 0) == 0) {
            fs::remove_all(entry.path());
        }
    }
}

int cmd_evolve(Session& s, const EvolveArgs& a) {
    auto& cfg = s.config;
    const fs::path data = pick_dataset(a.data, cfg.paths.train, "train");
    const fs::path ckpt = a.checkpoint.empty() ? cfg.paths.checkpoint : fs::path(a.checkpoint);
    const fs::path run_dir = a.run_dir.empty() ? cfg.paths.out_dir / "run" : fs::path(a.run_dir);

    const Dataset d = load_dataset(s, data);
    s.at("load checkpoint");
    const ar::ARModeld model = ar::load_model(ckpt);

    Backends b = make_backends(cfg);
    std::string rw = b.rewriter_id, resp = b.responder_id;
    if (!a.warm_start.empty()) {
        s.at("read warm-start models");
        std::tie(rw, resp) = read_models_file(a.warm_start);
    }
    if (s.force) clear_run_dir(run_dir);

    s.at("evolve");
    CheckedEmbedder embedder(need(b.embedder, "embedder"), model.input_dim());
    BackendBundle bundle{need(b.generators, "rewriter"), embedder, need(b.similarity, "similarity"),
                         model, [&](const std::string& m) { s.err << "notice: " << m << "\n"; }};
    const EvolutionState state =
        run(d, bundle, need(b.trainer, "trainer"), cfg.evolve, run_dir, rw, resp);

    s.at("write contexts");
    std::ostringstream contexts;
    for (const auto& c : state.working_contexts) contexts << to_json(c).dump() << "\n";
    write_if_changed(run_dir / "contexts.jsonl", contexts.str());

    for (std::size_t r = 0; r < state.dataset_paths.size(); ++r) {
        const auto& f = state.dataset_paths[r];
        s.out << "round " << r + 1 << ": rewrite pairs " << f.rewrite_pairs << ", response pairs "
              << f.response_pairs << "\n";
    }
    s.out << "rounds " << state.k << ", replacements " << state.replacement_count
          << "\nrewriter model " << state.rewriter_model_id << "\nresponder model "
          << state.responder_model_id << "\ncheckpoint " << (run_dir / kCheckpointName).string()
          << "\n";
    return kExitOk;
}

// -- infer --------------------------------------------------------------------

struct InferArgs {
    std::string data, checkpoint, out, run_dir;
};

int cmd_infer(Session& s, const InferArgs& a) {
    auto& cfg = s.config;
    const fs::path data = pick_dataset(a.data, cfg.paths.test, "test");
    const fs::path ckpt = a.checkpoint.empty() ? cfg.paths.checkpoint : fs::path(a.checkpoint);
    const fs::path out = a.out.empty() ? cfg.paths.out_dir / "predictions.jsonl" : fs::path(a.out);

    std::vector<fs::path> inputs{data, ckpt};
    if (!a.run_dir.empty()) inputs.push_back(fs::path(a.run_dir) / kCheckpointName);
    require_file(s, ckpt, "load checkpoint");
    s.at("load dataset");
    const OutputGuard guard(stamp_for_file(out), guard_inputs(s, "infer", inputs, {}));
    if (!s.force && guard.up_to_date()) return up_to_date_notice(s, "infer");
    const Dataset d = load_dataset(s, data);

    s.at("load checkpoint");
    const ar::ARModeld model = ar::load_model(ckpt);
    Backends b = make_backends(cfg);
    std::string rw = b.rewriter_id, resp = b.responder_id;
    if (!a.run_dir.empty()) {
        s.at("read evolve checkpoint");
        const auto loaded = read_checkpoint(a.run_dir);
        if (!loaded) throw DataError("no evolve checkpoint in '" + a.run_dir + "'");
        rw = loaded->state.rewriter_model_id;
        resp = loaded->state.responder_model_id;
    }

    s.at("infer");
    CheckedEmbedder embedder(need(b.embedder, "embedder"), model.input_dim());
    auto& factory = need(b.generators, "rewriter");
    auto rewriter_gen = factory.for_model(rw);
    auto responder = factory.for_model(resp);
    SimilarityScorer& sim = need(b.similarity, "similarity");
    std::string lines;
    std::size_t rewrote = 0;
    for (std::size_t i = 0; i < d.contexts.size(); ++i) {
        TreeRewriter rewriter(*rewriter_gen, sim, cfg.evolve.sampler_for(0, i));
        const auto r = infer(d.contexts[i], model, embedder, rewriter, *responder, cfg.evolve);
        rewrote += r.rewrote;
        lines += json{{"context_id", d.line_numbers[i]},
                      {"response", r.response},
                      {"rewrote", r.rewrote},
                      {"coherence", r.coherence ? json(*r.coherence) : json(nullptr)}}.dump() + "\n";
    }

    s.at("write predictions");
    write_atomic(out, lines);
    guard.commit({out});
    s.out << "rewrote " << rewrote << " of " << d.contexts.size() << " contexts (phi "
          << cfg.evolve.phi << ")\npredictions " << out.string() << "\n";
    return kExitOk;
}

// -- eval ---------------------------------------------------------------------

struct EvalArgs {
    std::string predictions, data, out;
};

int cmd_eval(Session& s, const EvalArgs& a) {
    auto& cfg = s.config;
    const fs::path data = pick_dataset(a.data, cfg.paths.test, "test");
    const Dataset gold = load_dataset(s, data);

    s.at("load predictions");
    std::map<std::size_t, const DialogueContext*> by_line;
    for (std::size_t i = 0; i < gold.contexts.size(); ++i) by_line[gold.line_numbers[i]] = &gold.contexts[i];
    std::ifstream in(a.predictions);
    if (!in) throw DataError("cannot open predictions '" + a.predictions + "'");
    std::vector<std::pair<metrics::TokenSeq, metrics::TokenSeq>> pairs;
    std::string line;
    for (std::size_t n = 1; std::getline(in, line); ++n) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = a.predictions + ":" + std::to_string(n);
        json rec;
        try {
            rec = json::parse(line);
            const auto id = rec.at("context_id").get<std::size_t>();
            const auto it = by_line.find(id);
            if (it == by_line.end()) throw DataError(where + ": context_id " + std::to_string(id) + " is not in the gold set");
            if (!it->second->gold_response) throw DataError(where + ": gold context has no gold_response");
            pairs.emplace_back(metrics::tokenize(rec.at("response").get<std::string>()),
                               metrics::tokenize(*it->second->gold_response));
        } catch (const json::exception& e) {
            throw DataError(where + ": " + e.what());
        }
    }
    if (pairs.empty()) throw DataError("no predictions in '" + a.predictions + "'");

    s.at("compute metrics");
    std::map<std::string, double> sums;
    std::vector<metrics::TokenSeq> responses;
    for (const auto& [cand, ref] : pairs) {
        for (int k = 1; k <= 4; ++k) sums["bleu" + std::to_string(k)] += metrics::bleu_n(cand, ref, k);
        sums["meteor"] += metrics::meteor_lite(cand, ref);
        sums["rouge_l"] += metrics::rouge_l(cand, ref).f;
        responses.push_back(cand);
    }
    json result = json::object();
    const double n = static_cast<double>(pairs.size());
    for (const auto& name : cfg.metrics) {
        if (name == "dist1") result[name] = metrics::dist_n(responses, 1);
        else if (name == "dist2") result[name] = metrics::dist_n(responses, 2);
        else result[name] = sums.at(name) / n;
    }

    s.out << std::left << std::setw(10) << "metric" << "value\n";
    for (const auto& name : cfg.metrics) {
        s.out << std::setw(10) << name << fmt(result[name].get<double>()) << "\n";
    }
    s.out << "(" << pairs.size() << " predictions)\n";
    if (!a.out.empty()) {
        s.at("write metrics");
        result["count"] = pairs.size();
        write_if_changed(a.out, result.dump(2) + "\n");
    }
    return kExitOk;
}

// -- synth --------------------------------------------------------------------

struct SynthArgs {
    std::string out;
    int contexts = 1000;
    int min_turns = 2;
    int max_turns = 8;
};

int cmd_synth(Session& s, const SynthArgs& a) {
    if (a.out.empty()) throw ConfigError("synth: --out is required");
    if (a.contexts < 1 || a.min_turns < 1 || a.max_turns < a.min_turns) {
        throw ConfigError("synth: need contexts >= 1 and 1 <= min-turns <= max-turns");
    }
    SyntheticConfig sc;
    sc.contexts = a.contexts;
    sc.min_turns = a.min_turns;
    sc.max_turns = a.max_turns;
    sc.seed = s.config.seed;
    s.at("generate");
    std::string lines;
    for (const auto& c : synthetic_corpus(sc)) lines += to_json(c).dump() + "\n";
    s.at("write corpus");
    write_if_changed(a.out, lines);
    s.out << "wrote " << a.contexts << " contexts to " << a.out << "\n";
    return kExitOk;
}

}  // namespace

// ---------------------------------------------------------------------------
// EngineConfig

void EngineConfig::apply_seed(std::uint64_t value) {
    seed = value;
    arhead.seed = value;
    evolve.seed = value;
    evolve.sampler.seed = value;
}

void EngineConfig::check() const {
    if (backend_mode != "mock" && backend_mode != "http") {
        throw ConfigError("backends.mode: expected mock or http");
    }
    if (mock.embed_dim < 1) throw ConfigError("backends.mock.embed_dim must be >= 1");
    if (mock.planted && mock.embed_dim < 2 * mock::PlantedSignal{}.max_turns) {
        throw ConfigError("backends.mock.embed_dim must be >= " +
                          std::to_string(2 * mock::PlantedSignal{}.max_turns) +
                          " with the planted signal");
    }
    for (const auto* e : {&rewriter, &responder, &teacher, &embedder, &similarity}) {
        if (*e) e->value().check();
    }
    if (backend_mode == "http" && embedder && embed_dim < 1) {
        throw ConfigError("backends.embedder.dim must be >= 1");
    }
    if (input_dim && *input_dim < 1) throw ConfigError("arhead.input_dim must be >= 1");
    if (!(holdout >= 0.0 && holdout < 1.0)) throw ConfigError("arhead.holdout must lie in [0, 1)");
    for (const auto& m : metrics) {
        if (std::find(kMetricNames.begin(), kMetricNames.end(), m) == kMetricNames.end()) {
            throw ConfigError("metrics: unknown metric '" + m + "'");
        }
    }
    if (rewriter_model.empty() || responder_model.empty()) {
        throw ConfigError("backends.models: model ids must be non-empty");
    }
    arhead.check();
    evolve.check();
}

EngineConfig engine_config_from_json(const json& j, const fs::path& base_dir) {
    EngineConfig c;
    Section root(j, "config");
    std::uint64_t seed = 0;
    root.get("seed", seed);
    c.apply_seed(seed);

    if (root.has("paths")) {
        auto p = root.child("paths");
        p.path("train", base_dir, c.paths.train);
        p.path("valid", base_dir, c.paths.valid);
        p.path("test", base_dir, c.paths.test);
        p.path("checkpoint", base_dir, c.paths.checkpoint);
        p.path("out_dir", base_dir, c.paths.out_dir);
        p.done();
    }
    if (!c.paths.checkpoint.is_absolute()) c.paths.checkpoint = base_dir / c.paths.checkpoint;
    if (!c.paths.out_dir.is_absolute()) c.paths.out_dir = base_dir / c.paths.out_dir;

    if (root.has("backends")) {
        auto b = root.child("backends");
        b.get("mode", c.backend_mode);
        if (b.has("mock")) {
            auto m = b.child("mock");
            m.get("embed_dim", c.mock.embed_dim);
            m.get("planted", c.mock.planted);
            std::string style = style_name(c.mock.style);
            m.get("style", style);
            c.mock.style = parse_style(style);
            m.path("script", base_dir, c.mock.script);
            m.done();
        }
        if (b.has("rewriter")) c.rewriter = endpoint_from_json(b.child("rewriter"));
        if (b.has("responder")) c.responder = endpoint_from_json(b.child("responder"));
        if (b.has("teacher")) c.teacher = endpoint_from_json(b.child("teacher"));
        if (b.has("embedder")) c.embedder = endpoint_from_json(b.child("embedder"), &c.embed_dim);
        if (b.has("similarity")) c.similarity = endpoint_from_json(b.child("similarity"));
        if (b.has("trainer")) {
            auto t = b.child("trainer");
            std::string cmd;
            t.get("command", cmd);
            if (!cmd.empty()) c.trainer_command = cmd;
            t.done();
        }
        if (b.has("models")) {
            auto m = b.child("models");
            m.get("rewriter", c.rewriter_model);
            m.get("responder", c.responder_model);
            m.get("teacher", c.teacher_model);
            m.done();
        }
        b.done();
    }

    if (root.has("arhead")) {
        auto a = root.child("arhead");
        a.get("epochs", c.arhead.epochs);
        a.get("batch_size", c.arhead.batch_size);
        a.get("learning_rate", c.arhead.learning_rate);
        a.get("hidden", c.arhead.hidden);
        a.get("projection", c.arhead.projection);
        if (a.has("input_dim")) {
            int d = 0;
            a.get("input_dim", d);
            c.input_dim = d;
        }
        a.get("holdout", c.holdout);
        std::string proxy = ar::to_string(c.proxy);
        a.get("proxy", proxy);
        c.proxy = ar::parse_proxy(proxy);
        a.done();
    }

    if (root.has("sampler")) {
        auto s = root.child("sampler");
        auto& sc = c.evolve.sampler;
        s.get("n", sc.n);
        s.get("lambda", sc.lambda);
        s.get("max_paths", sc.max_paths);
        s.get("temperatures", sc.temperatures);
        s.get("parallelism", sc.parallelism);
        s.get("max_tokens", sc.max_tokens);
        s.done();
    }

    if (root.has("evolve")) {
        auto e = root.child("evolve");
        auto& ec = c.evolve;
        e.get("rounds", ec.rounds);
        e.get("candidates", ec.candidates);
        e.get("phi", ec.phi);
        e.get("tau", ec.tau);
        e.get("beta", ec.dpo.beta);
        e.get("parallelism", ec.parallelism);
        e.get("response_temperature", ec.response.temperature);
        e.get("response_max_tokens", ec.response.max_tokens);
        if (e.has("trainer_params")) ec.trainer_params = j.at("evolve").at("trainer_params");
        e.done();
    }

    root.get("metrics", c.metrics);
    root.done();
    return c;
}

EngineConfig load_engine_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
    }
    return engine_config_from_json(j, fs::absolute(path).parent_path());
}

json to_json(const EngineConfig& c) {
    auto opt_path = [](const std::optional<fs::path>& p) { return p ? json(p->string()) : json(nullptr); };
    auto opt_ep = [](const std::optional<BackendEndpoint>& e) { return e ? endpoint_json(*e) : json(nullptr); };
    const auto& sc = c.evolve.sampler;
    return {
        {"seed", c.seed},
        {"paths",
         {{"train", opt_path(c.paths.train)},
          {"valid", opt_path(c.paths.valid)},
          {"test", opt_path(c.paths.test)},
          {"checkpoint", c.paths.checkpoint.string()},
          {"out_dir", c.paths.out_dir.string()}}},
        {"backends",
         {{"mode", c.backend_mode},
          {"mock",
           {{"embed_dim", c.mock.embed_dim},
            {"planted", c.mock.planted},
            {"style", style_name(c.mock.style)},
            {"script", opt_path(c.mock.script)}}},
          {"rewriter", opt_ep(c.rewriter)},
          {"responder", opt_ep(c.responder)},
          {"teacher", opt_ep(c.teacher)},
          {"embedder", opt_ep(c.embedder)},
          {"embed_dim", c.embed_dim},
          {"similarity", opt_ep(c.similarity)},
          {"trainer", c.trainer_command ? json(*c.trainer_command) : json(nullptr)},
          {"models",
           {{"rewriter", c.rewriter_model},
            {"responder", c.responder_model},
            {"teacher", c.teacher_model}}}}},
        {"arhead",
         {{"epochs", c.arhead.epochs},
          {"batch_size", c.arhead.batch_size},
          {"learning_rate", c.arhead.learning_rate},
          {"hidden", c.arhead.hidden},
          {"projection", c.arhead.projection},
          {"input_dim", c.input_dim ? json(*c.input_dim) : json(nullptr)},
          {"holdout", c.holdout},
          {"proxy", ar::to_string(c.proxy)}}},
        {"sampler",
         {{"n", sc.n},
          {"lambda", sc.lambda},
          {"max_paths", sc.max_paths},
          {"temperatures", sc.temperatures},
          {"parallelism", sc.parallelism},
          {"max_tokens", sc.max_tokens}}},
        {"evolve",
         {{"rounds", c.evolve.rounds},
          {"candidates", c.evolve.candidates},
          {"phi", c.evolve.phi},
          {"tau", c.evolve.tau},
          {"beta", c.evolve.dpo.beta},
          {"parallelism", c.evolve.parallelism},
          {"response_temperature", c.evolve.response.temperature},
          {"response_max_tokens", c.evolve.response.max_tokens},
          {"trainer_params", c.evolve.trainer_params}}},
        {"metrics", c.metrics},
    };
}

Backends make_backends(const EngineConfig& c) {
    Backends b;
    std::shared_ptr<const mock::MockScript> script;
    if (c.mock.script) script = std::make_shared<mock::MockScript>(mock::MockScript::load(*c.mock.script));

    if (c.backend_mode == "mock") {
        b.rewriter_id = c.rewriter_model;
        b.responder_id = c.responder_model;
        b.generators = std::make_unique<mock::MockGeneratorFactory>(c.seed, script, c.mock.style);
        b.teacher = std::make_shared<mock::MockGenerator>(c.teacher_model, c.seed, script, c.mock.style);
        std::optional<mock::PlantedSignal> planted;
        if (c.mock.planted) planted = mock::PlantedSignal{};
        b.embedder = std::make_unique<mock::MockEmbedder>(c.mock.embed_dim, c.seed, planted, script);
        b.similarity = std::make_unique<mock::MockSimilarity>();
        if (!c.trainer_command) b.trainer = std::make_unique<mock::MockTrainerHook>();
    } else {
        b.rewriter_id = c.rewriter ? c.rewriter->model : c.rewriter_model;
        b.responder_id = c.responder ? c.responder->model : c.responder_model;
        auto factory_for = [](const std::optional<BackendEndpoint>& e) -> std::unique_ptr<GeneratorFactory> {
            if (!e) return nullptr;
            return std::make_unique<HttpGeneratorFactory>(*e, make_http_transport(*e));
        };
        if (c.rewriter || c.responder) {
            b.generators = std::make_unique<RoutingFactory>(factory_for(c.rewriter),
                                                            factory_for(c.responder), b.responder_id);
        }
        if (c.teacher) b.teacher = std::make_shared<HttpGenerator>(*c.teacher, make_http_transport(*c.teacher));
        if (c.embedder) {
            b.embedder = std::make_unique<HttpEmbedder>(*c.embedder, make_http_transport(*c.embedder),
                                                        c.embed_dim);
        }
        if (c.similarity) {
            b.similarity = std::make_unique<HttpSimilarity>(*c.similarity,
                                                            make_http_transport(*c.similarity));
        }
    }
    if (c.trainer_command) b.trainer = std::make_unique<CommandTrainerHook>(*c.trainer_command);
    return b;
}

// ---------------------------------------------------------------------------
// Entry point

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Dialogue rewriting and response alignment pipeline", "dialign"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path, proxy;
    std::uint64_t seed = 0;
    double phi = 0, tau = 0, lambda = 0;
    int rounds = 0, candidates = 0;
    bool force = false;
    auto* o_seed = app.add_option("--seed", seed, "Global seed (overrides the config)");
    app.add_option("--config", config_path, "JSON config file");
    app.add_flag("--force", force, "Recompute even when outputs are up to date");
    auto* o_proxy = app.add_option("--proxy", proxy, "Coherence proxy")
                        ->check(CLI::IsMember({"probability", "accuracy"}));
    auto* o_phi = app.add_option("--phi", phi, "Inference rewrite threshold");
    auto* o_tau = app.add_option("--tau", tau, "Calibration temperature");
    auto* o_rounds = app.add_option("--rounds", rounds, "Self-evolution rounds");
    auto* o_cand = app.add_option("--candidates", candidates, "Candidates per context");
    auto* o_lambda = app.add_option("--lambda", lambda, "Similarity pruning threshold");

    TrainArArgs train_ar;
    auto* c_train = app.add_subcommand("train-ar", "Train the addressee-recognition head");
    c_train->add_option("--data", train_ar.data, "Training JSONL");
    c_train->add_option("--valid", train_ar.valid, "Validation JSONL");
    c_train->add_option("--out", train_ar.out, "Checkpoint path");

    ScoreArgs score;
    auto* c_score = app.add_subcommand("score", "Per-context coherence report");
    c_score->add_option("--data", score.data, "Dataset JSONL");
    c_score->add_option("--checkpoint", score.checkpoint, "AR head checkpoint");
    c_score->add_option("--out", score.out, "Report JSONL");

    SampleArgs sample;
    auto* c_sample = app.add_subcommand("sample", "Sample pruned rewrite trees");
    c_sample->add_option("--data", sample.data, "Dataset JSONL");
    c_sample->add_option("--out", sample.out, "Output directory");

    BuildPrefsArgs prefs;
    auto* c_prefs = app.add_subcommand("build-prefs", "Warm-up preference data from the teacher");
    c_prefs->add_option("--data", prefs.data, "Dataset JSONL");
    c_prefs->add_option("--checkpoint", prefs.checkpoint, "AR head checkpoint");
    c_prefs->add_option("--out", prefs.out, "Output directory");

    EvolveArgs evolve;
    auto* c_evolve = app.add_subcommand("evolve", "Run or resume mutual self-evolution");
    c_evolve->add_option("--data", evolve.data, "Dataset JSONL");
    c_evolve->add_option("--checkpoint", evolve.checkpoint, "AR head checkpoint");
    c_evolve->add_option("--run-dir", evolve.run_dir, "Run directory");
    c_evolve->add_option("--warm-start", evolve.warm_start, "models.json from build-prefs");

    InferArgs inf;
    auto* c_infer = app.add_subcommand("infer", "Generate responses with adaptive rewriting");
    c_infer->add_option("--data", inf.data, "Dataset JSONL");
    c_infer->add_option("--checkpoint", inf.checkpoint, "AR head checkpoint");
    c_infer->add_option("--out", inf.out, "Predictions JSONL");
    c_infer->add_option("--run-dir", inf.run_dir, "Take model ids from this evolve run");

    EvalArgs ev;
    auto* c_eval = app.add_subcommand("eval", "Score predictions against gold responses");
    c_eval->add_option("--predictions", ev.predictions, "Predictions JSONL")->required();
    c_eval->add_option("--data", ev.data, "Gold dataset JSONL");
    c_eval->add_option("--out", ev.out, "Metrics JSON");

    SynthArgs synth;
    auto* c_synth = app.add_subcommand("synth", "Write a synthetic planted-signal corpus");
    c_synth->add_option("--out", synth.out, "Output JSONL");
    c_synth->add_option("--contexts", synth.contexts, "Number of contexts");
    c_synth->add_option("--min-turns", synth.min_turns, "Fewest turns per context");
    c_synth->add_option("--max-turns", synth.max_turns, "Most turns per context");

    // CLI11 consumes the argument vector from the back.
    std::vector<std::string> reversed(args.begin() + (args.empty() ? 0 : 1), args.end());
    std::reverse(reversed.begin(), reversed.end());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitConfig;
    }

    std::string command = "dialign";
    for (auto* sub : app.get_subcommands()) command = sub->get_name();
    Session s{EngineConfig{}, out, err};
    try {
        s.at("load config");
        if (!config_path.empty()) {
            s.config = load_engine_config(config_path);
        } else {
            s.config.paths.checkpoint = fs::absolute(s.config.paths.checkpoint);
            s.config.paths.out_dir = fs::absolute(s.config.paths.out_dir);
        }
        if (o_seed->count()) s.config.apply_seed(seed);
        if (o_proxy->count()) s.config.proxy = ar::parse_proxy(proxy);
        if (o_phi->count()) s.config.evolve.phi = phi;
        if (o_tau->count()) s.config.evolve.tau = tau;
        if (o_rounds->count()) s.config.evolve.rounds = rounds;
        if (o_cand->count()) s.config.evolve.candidates = candidates;
        if (o_lambda->count()) s.config.evolve.sampler.lambda = lambda;
        s.at("validate config");
        s.config.check();
        s.force = force;
        s.proxy = s.config.proxy;

        if (*c_train) return cmd_train_ar(s, train_ar);
        if (*c_score) return cmd_score(s, score);
        if (*c_sample) return cmd_sample(s, sample);
        if (*c_prefs) return cmd_build_prefs(s, prefs);
        if (*c_evolve) return cmd_evolve(s, evolve);
        if (*c_infer) return cmd_infer(s, inf);
        if (*c_eval) return cmd_eval(s, ev);
        if (*c_synth) return cmd_synth(s, synth);
        return kExitInternal;
    } catch (const ConfigError& e) {
        err << "dialign " << command << ": " << s.stage << ": config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const BackendError& e) {
        err << "dialign " << command << ": " << s.stage << ": backend error (" << to_string(e.kind())
            << "): " << e.what() << "\n";
        return kExitBackend;
    } catch (const DataError& e) {
        err << "dialign " << command << ": " << s.stage << ": data error: " << e.what() << "\n";
        return kExitData;
    } catch (const fs::filesystem_error& e) {
        err << "dialign " << command << ": " << s.stage << ": file error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        err << "dialign " << command << ": " << s.stage << ": internal error: " << e.what() << "\n";
        return kExitInternal;
    }
}

}  // namespace dialign
