#include "dialign/arhead.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>

namespace dialign::ar {

namespace {

constexpr int kFormatVersion = 1;
constexpr const char* kFormatName = "dialign-arhead";

void require_matching_dim(const Embedder& embedder, int model_dim) {
    if (embedder.dim() != model_dim) {
        throw BackendError(BackendErrorKind::DimensionDrift,
                           "embedder dimension " + std::to_string(embedder.dim()) +
                               " does not match model input dimension " + std::to_string(model_dim));
    }
}

}  // namespace

void ARTrainConfig::check() const {
    if (epochs < 1) throw ConfigError("arhead: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("arhead: batch_size must be >= 1");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
        throw ConfigError("arhead: learning_rate must be a positive real");
    }
    if (hidden < 1 || projection < 1) throw ConfigError("arhead: hidden and projection must be >= 1");
}

const char* to_string(CoherenceProxy proxy) {
    return proxy == CoherenceProxy::Probability ? "probability" : "accuracy";
}

CoherenceProxy parse_proxy(std::string_view name) {
    if (name == "probability") return CoherenceProxy::Probability;
    if (name == "accuracy") return CoherenceProxy::Accuracy;
    throw ConfigError("unknown coherence proxy '" + std::string(name) + "'");
}

ARModeld init_model(int d, int h, int p, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uniform(-0.05, 0.05);
    ARModeld model = ARModeld::zeros(d, h, p);
    model.for_each_param([&](const char*, auto& block) {
        for (Eigen::Index r = 0; r < block.rows(); ++r)
            for (Eigen::Index c = 0; c < block.cols(); ++c) block(r, c) = uniform(rng);
    });
    return model;
}

LabeledContext<double> label(const DialogueContext& context, Embedder& embedder) {
    LabeledContext<double> out;
    out.turns = embedder.embed_turns(context);
    if (out.turns.rows() != context.size()) {
        throw BackendError(BackendErrorKind::CountMismatch,
                           "embedder returned " + std::to_string(out.turns.rows()) +
                               " vectors for " + std::to_string(context.size()) + " turns");
    }
    out.reply_to.reserve(context.turns.size());
    for (const Turn& turn : context.turns) out.reply_to.push_back(turn.reply_to.value_or(0));
    return out;
}

TrainResult train(std::span<const LabeledContext<double>> examples, const ARTrainConfig& config) {
    config.check();
    std::vector<std::size_t> order;
    for (std::size_t k = 0; k < examples.size(); ++k) {
        if (examples[k].turns.rows() >= 2) order.push_back(k);
    }
    if (order.empty()) throw DataError("arhead: training set has no context with two or more turns");
    const int d = static_cast<int>(examples[order.front()].turns.cols());

    std::mt19937_64 rng(config.seed);
    TrainResult result{init_model(d, config.hidden, config.projection, rng()), {}};
    std::vector<LabeledContext<double>> trainable;
    trainable.reserve(order.size());
    for (std::size_t k : order) trainable.push_back(examples[k]);
    std::vector<std::size_t> perm(trainable.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});

    std::vector<LabeledContext<double>> batch;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        std::shuffle(perm.begin(), perm.end(), rng);
        for (std::size_t begin = 0; begin < perm.size();
             begin += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t end =
                std::min(perm.size(), begin + static_cast<std::size_t>(config.batch_size));
            batch.clear();
            for (std::size_t k = begin; k < end; ++k) batch.push_back(trainable[perm[k]]);
            const auto step = loss_and_grad<double>(batch, result.model);
            result.model.descend(config.learning_rate, step.grad);
        }
        result.epoch_losses.push_back(loss_and_grad<double>(trainable, result.model).loss);
    }
    if (!result.model.all_finite()) {
        throw DataError("arhead: training diverged (non-finite parameters); lower the learning rate");
    }
    return result;
}

TrainResult train(const Dataset& dataset, Embedder& embedder, const ARTrainConfig& config) {
    config.check();
    if (dataset.contexts.empty()) throw DataError("arhead: empty training dataset");
    std::vector<LabeledContext<double>> examples;
    examples.reserve(dataset.contexts.size());
    for (const auto& context : dataset.contexts) examples.push_back(label(context, embedder));
    return train(examples, config);
}

double accuracy(const ARModeld& model, std::span<const LabeledContext<double>> examples) {
    std::size_t correct = 0, total = 0;
    for (const auto& example : examples) {
        const int t = static_cast<int>(example.turns.rows());
        if (t < 2) continue;
        const auto scores = score_matrix(example.turns, model);
        for (int i = 2; i <= t; ++i) {
            ++total;
            if (predict_addressee(scores, i) == example.reply_to[static_cast<std::size_t>(i - 1)]) {
                ++correct;
            }
        }
    }
    if (total == 0) throw DataError("accuracy: no turns with an addressee to evaluate");
    return static_cast<double>(correct) / static_cast<double>(total);
}

double accuracy(const ARModeld& model, const Dataset& dataset, Embedder& embedder) {
    if (dataset.contexts.empty()) throw DataError("accuracy: empty dataset");
    require_matching_dim(embedder, model.input_dim());
    std::vector<LabeledContext<double>> examples;
    for (const auto& context : dataset.contexts) examples.push_back(label(context, embedder));
    return accuracy(model, examples);
}

double coherence_from_scores(const Matrix<double>& scores, std::span<const int> reply_to,
                             CoherenceProxy proxy) {
    const int t = static_cast<int>(scores.rows());
    if (t < 2) return 1.0;
    double sum = 0.0;
    for (int i = 2; i <= t; ++i) {
        const int gold = reply_to[static_cast<std::size_t>(i - 1)];
        if (gold < 1 || gold >= i) {
            throw DataError("coherence: turn " + std::to_string(i) + " lacks a valid reply_to");
        }
        if (proxy == CoherenceProxy::Probability) {
            sum += addressee_probs(scores, i)(gold - 1);
        } else {
            sum += predict_addressee(scores, i) == gold ? 1.0 : 0.0;
        }
    }
    return sum / static_cast<double>(t - 1);
}

double coherence(const DialogueContext& context, const ARModeld& model, Embedder& embedder,
                 CoherenceProxy proxy) {
    for (int i = 2; i <= context.size(); ++i) {
        if (!context.turn(i).reply_to) {
            throw DataError("coherence: turn " + std::to_string(i) + " has no reply_to");
        }
    }
    if (context.size() < 2) return 1.0;
    require_matching_dim(embedder, model.input_dim());
    const auto example = label(context, embedder);
    return coherence_from_scores(score_matrix(example.turns, model), example.reply_to, proxy);
}

double response_addressee_accuracy(
    std::span<const std::pair<DialogueContext, std::string>> contexts_with_responses,
    const ARModeld& model, Embedder& embedder) {
    if (contexts_with_responses.empty()) throw DataError("response accuracy: no contexts");
    require_matching_dim(embedder, model.input_dim());
    std::size_t correct = 0;
    for (const auto& [context, response] : contexts_with_responses) {
        const int t = context.size();
        if (context.target_reply_to < 1 || context.target_reply_to > t) {
            throw DataError("response accuracy: target_reply_to out of range");
        }
        DialogueContext extended = context;
        extended.turns.push_back(Turn{t + 1, context.target_speaker, context.target_reply_to, response});
        const auto example = label(extended, embedder);
        const auto scores = score_matrix(example.turns, model);
        if (predict_addressee(scores, t + 1) == context.target_reply_to) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(contexts_with_responses.size());
}

nlohmann::json to_json(const ARModeld& model) {
    nlohmann::json params = nlohmann::json::object();
    model.for_each_param([&](const char* name, const auto& block) {
        std::vector<double> values;
        values.reserve(static_cast<std::size_t>(block.size()));
        for (Eigen::Index r = 0; r < block.rows(); ++r)
            for (Eigen::Index c = 0; c < block.cols(); ++c) values.push_back(block(r, c));
        params[name] = std::move(values);
    });
    return {{"format", kFormatName},
            {"format_version", kFormatVersion},
            {"dims", {{"d", model.input_dim()}, {"h", model.hidden_dim()}, {"p", model.proj_dim()}}},
            {"params", std::move(params)}};
}

ARModeld model_from_json(const nlohmann::json& json) {
    try {
        if (json.at("format").get<std::string>() != kFormatName) {
            throw DataError("arhead checkpoint: unexpected format tag");
        }
        if (json.at("format_version").get<int>() != kFormatVersion) {
            throw DataError("arhead checkpoint: unsupported format_version");
        }
        const auto& dims = json.at("dims");
        ARModeld model = ARModeld::zeros(dims.at("d").get<int>(), dims.at("h").get<int>(),
                                         dims.at("p").get<int>());
        const auto& params = json.at("params");
        model.for_each_param([&](const char* name, auto& block) {
            const auto values = params.at(name).get<std::vector<double>>();
            if (static_cast<Eigen::Index>(values.size()) != block.size()) {
                throw DataError(std::string("arhead checkpoint: wrong size for ") + name);
            }
            std::size_t k = 0;
            for (Eigen::Index r = 0; r < block.rows(); ++r)
                for (Eigen::Index c = 0; c < block.cols(); ++c) block(r, c) = values[k++];
        });
        if (!model.all_finite()) throw DataError("arhead checkpoint: non-finite parameter");
        return model;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("arhead checkpoint: ") + e.what());
    }
}

void save_model(const ARModeld& model, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write model '" + path.string() + "'");
    out << to_json(model).dump() << '\n';
    if (!out) throw DataError("I/O failure writing model '" + path.string() + "'");
}

ARModeld load_model(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open model '" + path.string() + "'");
    try {
        return model_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError("model '" + path.string() + "' is not valid JSON: " + e.what());
    }
}

}  // namespace dialign::ar
