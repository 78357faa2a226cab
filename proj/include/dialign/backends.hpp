#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "dialign/corpus.hpp"

namespace dialign {

struct GenerationParams {
    double temperature = 1.0;
    int max_tokens = 256;
    std::vector<std::string> stop;
    std::optional<std::uint64_t> seed;  // honored by mocks, advisory over HTTP
};

class TextGenerator {
public:
    virtual ~TextGenerator() = default;
    virtual std::string generate(const std::string& prompt, const GenerationParams& params) = 0;
    virtual std::string model_id() const = 0;
};

/// n generations of one prompt at the given temperatures. Requests fan out
/// with at most `parallelism` in flight; results are ordered by request
/// index. Any failure fails the batch with an error naming the index.
std::vector<std::string> generate_many(TextGenerator& generator, const std::string& prompt,
                                       std::span<const double> temperatures,
                                       const GenerationParams& base, int parallelism = 4);

/// Resolves a model id (as evolved by the trainer hook) to a generator.
class GeneratorFactory {
public:
    virtual ~GeneratorFactory() = default;
    virtual std::shared_ptr<TextGenerator> for_model(const std::string& model_id) = 0;
};

/// One row per turn, constant column count per instance.
class Embedder {
public:
    virtual ~Embedder() = default;
    virtual Eigen::MatrixXd embed_turns(const DialogueContext& context) = 0;
    virtual int dim() const = 0;
};

/// Symmetric similarity in [-1, 1] with similarity(x, x) == 1.
class SimilarityScorer {
public:
    virtual ~SimilarityScorer() = default;
    virtual double similarity(std::string_view a, std::string_view b) = 0;
};

enum class ModelRole { Rewriter, Responder };
const char* to_string(ModelRole role);

struct TrainRequest {
    std::filesystem::path preference_file;
    std::string base_model;
    ModelRole role = ModelRole::Rewriter;
    int round = 0;
    nlohmann::json params = nlohmann::json::object();  // passed through untouched
};

class TrainerHook {
public:
    virtual ~TrainerHook() = default;
    /// Returns the id of the updated model.
    virtual std::string train(const TrainRequest& request) = 0;
};

// ---------------------------------------------------------------------------
// HTTP (chat-completions / embeddings wire format)

struct BackendEndpoint {
    std::string base_url;     // e.g. http://localhost:8000/v1
    std::string api_key_env;  // name of the variable, never the key itself
    std::string model;
    std::chrono::milliseconds timeout{30000};
    int max_retries = 3;
    std::chrono::milliseconds backoff_base{500};

    void check() const;
};

struct HttpResponse {
    int status = 0;
    std::string body;
};

using Headers = std::vector<std::pair<std::string, std::string>>;

class Transport {
public:
    virtual ~Transport() = default;
    /// Throws BackendError(Transport) when no response was received.
    virtual HttpResponse post(const std::string& path, const std::string& body,
                              const Headers& headers) = 0;
};

/// cpp-httplib transport bound to the scheme/host/port of `base_url`.
std::shared_ptr<Transport> make_http_transport(const BackendEndpoint& endpoint);

using Sleeper = std::function<void(std::chrono::milliseconds)>;
Sleeper real_sleeper();

/// Posts with exponential backoff (base * 2^attempt) on 429, 5xx, and
/// transport failures. Other non-2xx statuses fail immediately.
HttpResponse post_with_retry(Transport& transport, const std::string& path,
                             const std::string& body, const Headers& headers,
                             const BackendEndpoint& endpoint, const Sleeper& sleep);

/// Path component of base_url ("/v1" for http://host:port/v1).
std::string endpoint_path_prefix(const std::string& base_url);

class HttpGenerator final : public TextGenerator {
public:
    HttpGenerator(BackendEndpoint endpoint, std::shared_ptr<Transport> transport,
                  Sleeper sleep = real_sleeper());

    std::string generate(const std::string& prompt, const GenerationParams& params) override;
    std::string model_id() const override { return endpoint_.model; }

    static nlohmann::json request_body(const std::string& model, const std::string& prompt,
                                       const GenerationParams& params);

private:
    BackendEndpoint endpoint_;
    std::shared_ptr<Transport> transport_;
    Sleeper sleep_;
};

class HttpGeneratorFactory final : public GeneratorFactory {
public:
    HttpGeneratorFactory(BackendEndpoint endpoint, std::shared_ptr<Transport> transport,
                         Sleeper sleep = real_sleeper());
    std::shared_ptr<TextGenerator> for_model(const std::string& model_id) override;

private:
    BackendEndpoint endpoint_;
    std::shared_ptr<Transport> transport_;
    Sleeper sleep_;
};

/// Posts {"model", "input": [...]} and returns one row per input string.
Eigen::MatrixXd http_embed(Transport& transport, const BackendEndpoint& endpoint,
                           const std::vector<std::string>& inputs, const Sleeper& sleep);

/// Embeds each "Speaker k: text" line as its own input (one batched call).
class HttpEmbedder final : public Embedder {
public:
    HttpEmbedder(BackendEndpoint endpoint, std::shared_ptr<Transport> transport, int expected_dim,
                 Sleeper sleep = real_sleeper());

    Eigen::MatrixXd embed_turns(const DialogueContext& context) override;
    int dim() const override { return dim_; }

private:
    BackendEndpoint endpoint_;
    std::shared_ptr<Transport> transport_;
    Sleeper sleep_;
    int dim_;
};

/// Cosine similarity of two embedding vectors from the embeddings endpoint.
class HttpSimilarity final : public SimilarityScorer {
public:
    HttpSimilarity(BackendEndpoint endpoint, std::shared_ptr<Transport> transport,
                   Sleeper sleep = real_sleeper());
    double similarity(std::string_view a, std::string_view b) override;

private:
    BackendEndpoint endpoint_;
    std::shared_ptr<Transport> transport_;
    Sleeper sleep_;
};

/// Runs an external command:
///   <command> <preference_file> <base_model> <role> <round> '<params json>'
/// The last non-empty stdout line is the new model id.
class CommandTrainerHook final : public TrainerHook {
public:
    explicit CommandTrainerHook(std::string command) : command_(std::move(command)) {}
    std::string train(const TrainRequest& request) override;

private:
    std::string command_;
};

}  // namespace dialign
