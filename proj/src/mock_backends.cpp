#include "dialign/mock_backends.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include "dialign/digest.hpp"
#include "dialign/errors.hpp"
#include "dialign/metrics.hpp"

namespace dialign::mock {

namespace {

std::string format_temperature(double t) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", t);
    return buf;
}

std::vector<std::string> lines_of(const std::string& block) {
    std::vector<std::string> out;
    std::istringstream in(block);
    for (std::string line; std::getline(in, line);) {
        if (!line.empty()) out.push_back(line);
    }
    return out;
}

// "[r] Speaker k: text" or "Speaker k: text" -> text
std::string utterance_of(const std::string& line) {
    const auto colon = line.find(": ");
    if (colon == std::string::npos) return {};
    return line.substr(colon + 2);
}

std::string join(const std::vector<std::string>& words) {
    std::string out;
    for (const auto& w : words) {
        if (!out.empty()) out.push_back(' ');
        out += w;
    }
    return out;
}

std::string rewrite_utterance(const std::string& text, RewriteStyle style, std::uint64_t h) {
    const bool marked = has_address_marker(text);
    const std::string strengthened = marked ? text : "@" + text;
    switch (style) {
        case RewriteStyle::Strengthen: return strengthened;
        case RewriteStyle::Echo: return text;
        case RewriteStyle::Varied: break;
    }
    switch (h % 3) {
        case 0: return strengthened;
        case 1: return text;
        default: {
            // Light paraphrase: drop the last word when there is more than one.
            const auto space = text.find_last_of(' ');
            return space == std::string::npos ? text + " ." : text.substr(0, space);
        }
    }
}

std::string respond(const std::string& conversation, std::uint64_t h) {
    const auto lines = lines_of(conversation);
    if (lines.empty()) return "ok";
    // Last line is the open slot "[r] Speaker k:"; echo words of turn r.
    const std::string& slot = lines.back();
    std::size_t target = lines.size() - 1;
    if (slot.size() > 1 && slot[0] == '[') {
        target = static_cast<std::size_t>(std::max(1, std::atoi(slot.c_str() + 1)));
    }
    if (target == 0 || target > lines.size() - 1) target = lines.size() - 1;
    auto tokens = metrics::tokenize(utterance_of(lines[target - 1])).tokens;
    std::erase(tokens, std::string("@"));
    std::mt19937_64 rng(h);
    std::bernoulli_distribution keep(0.75);
    std::vector<std::string> words;
    for (const auto& tok : tokens) {
        if (keep(rng)) words.push_back(tok);
    }
    if (words.empty()) words.push_back(tokens.empty() ? std::string("ok") : tokens.front());
    return join(words);
}

}  // namespace

MockScript MockScript::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open mock script '" + path.string() + "'");
    MockScript script;
    try {
        const auto json = nlohmann::json::parse(in);
        if (json.contains("completions")) {
            script.completions = json.at("completions").get<std::map<std::string, std::string>>();
        }
        if (json.contains("embeddings")) {
            script.embedding_seeds =
                json.at("embeddings").get<std::map<std::string, std::uint64_t>>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("malformed mock script '" + path.string() + "': " + e.what());
    }
    return script;
}

std::string MockScript::completion_key(const std::string& prompt, double temperature) {
    return sha256_hex(prompt) + "+" + format_temperature(temperature);
}

bool has_address_marker(std::string_view text) {
    const auto first = text.find_first_not_of(" \t");
    return first != std::string_view::npos && text[first] == '@';
}

MockGenerator::MockGenerator(std::string model_id, std::uint64_t seed,
                             std::shared_ptr<const MockScript> script, RewriteStyle style,
                             bool strict)
    : model_id_(std::move(model_id)),
      seed_(seed),
      script_(std::move(script)),
      style_(style),
      strict_(strict) {}

std::string MockGenerator::generate(const std::string& prompt, const GenerationParams& params) {
    ++calls_;
    if (script_) {
        const auto key = MockScript::completion_key(prompt, params.temperature);
        if (auto it = script_->completions.find(key); it != script_->completions.end()) {
            return it->second;
        }
    }
    if (strict_) {
        throw BackendError(BackendErrorKind::Unscripted, "mock generator: no scripted completion");
    }
    const std::uint64_t h = sha256_u64(std::to_string(seed_) + '|' + model_id_ + '|' +
                                       format_temperature(params.temperature) + '|' + prompt);
    const std::string conversation = extract_conversation(prompt);
    if (prompt.find("\nRewritten Utterance:\n") != std::string::npos) {
        const auto lines = lines_of(conversation);
        if (lines.empty()) return {};
        return rewrite_utterance(utterance_of(lines.back()), style_, h);
    }
    if (prompt.find("\nResponse:\n") != std::string::npos) return respond(conversation, h);
    return "ok";
}

MockEmbedder::MockEmbedder(int dim, std::uint64_t seed, std::optional<PlantedSignal> planted,
                           std::shared_ptr<const MockScript> script)
    : dim_(dim), seed_(seed), planted_(planted), script_(std::move(script)) {
    if (dim_ < 1) throw ConfigError("mock embedder: dim must be >= 1");
    if (planted_ && dim_ < 2 * planted_->max_turns) {
        throw ConfigError("mock embedder: planted signal needs dim >= 2 * max_turns");
    }
}

Eigen::MatrixXd MockEmbedder::embed_turns(const DialogueContext& context) {
    ++calls_;
    const int t = context.size();
    if (t < 1) throw DataError("embed_turns: context has no turns");
    const auto ordinals = speaker_ordinals(context);
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(t, dim_);
    for (int i = 1; i <= t; ++i) {
        const Turn& turn = context.turn(i);
        const std::string line = std::to_string(ordinals.at(turn.speaker)) + '|' + turn.text;
        std::uint64_t noise_seed = sha256_u64(std::to_string(seed_) + '|' + line);
        if (script_) {
            if (auto it = script_->embedding_seeds.find(sha256_hex(turn.text));
                it != script_->embedding_seeds.end()) {
                noise_seed = it->second;
            }
        }
        std::mt19937_64 rng(noise_seed);
        std::normal_distribution<double> gauss(0.0, 1.0);
        const double noise = planted_ ? planted_->noise : 1.0;
        for (int c = 0; c < dim_; ++c) out(i - 1, c) = noise * gauss(rng);
        if (!planted_) continue;
        const int k = planted_->max_turns;
        out(i - 1, (i - 1) % k) += planted_->position_scale;
        if (turn.reply_to) {
            const double s = planted_->strength *
                             (has_address_marker(turn.text) ? 1.0 : planted_->weak_fraction);
            out(i - 1, k + (*turn.reply_to - 1) % k) += s;
        }
    }
    return out;
}

void MockSimilarity::script(const std::string& a, const std::string& b, double value) {
    table_[{a, b}] = value;
    table_[{b, a}] = value;
}

double MockSimilarity::similarity(std::string_view a, std::string_view b) {
    if (auto it = table_.find({std::string(a), std::string(b)}); it != table_.end()) {
        return it->second;
    }
    if (fn_) return fn_(a, b);
    return lexical_cosine(a, b);
}

double lexical_cosine(std::string_view a, std::string_view b) {
    if (a == b) return 1.0;
    std::map<std::string, std::pair<double, double>> counts;
    for (const auto& tok : metrics::tokenize(a).tokens) counts[tok].first += 1.0;
    for (const auto& tok : metrics::tokenize(b).tokens) counts[tok].second += 1.0;
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (const auto& [tok, c] : counts) {
        dot += c.first * c.second;
        na += c.first * c.first;
        nb += c.second * c.second;
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / std::sqrt(na * nb);
}

std::string MockTrainerHook::train(const TrainRequest& request) {
    {
        std::lock_guard lock(mutex_);
        requests_.push_back(request);
    }
    if (fail_on && *fail_on == request.role) {
        throw BackendError(BackendErrorKind::TrainerFailure,
                           std::string("mock trainer: scripted failure for ") + to_string(request.role));
    }
    if (!tag_rounds) return request.base_model;
    return request.base_model + "+r" + std::to_string(request.round);
}

std::vector<TrainRequest> MockTrainerHook::requests() const {
    std::lock_guard lock(mutex_);
    return requests_;
}

}  // namespace dialign::mock
