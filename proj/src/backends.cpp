#include "dialign/backends.hpp"

#include <httplib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <future>
#include <random>
#include <sstream>
#include <thread>

#include <sys/wait.h>

#include "dialign/errors.hpp"

namespace dialign {

namespace {

std::string trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(first, last - first + 1));
}

bool retryable(int status) { return status == 429 || (status >= 500 && status <= 599); }

std::pair<std::string, std::string> split_base_url(const std::string& base_url) {
    const auto scheme = base_url.find("://");
    const auto host_start = scheme == std::string::npos ? 0 : scheme + 3;
    const auto slash = base_url.find('/', host_start);
    if (slash == std::string::npos) return {base_url, ""};
    std::string prefix = base_url.substr(slash);
    while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
    return {base_url.substr(0, slash), prefix};
}

Headers auth_headers(const BackendEndpoint& endpoint) {
    Headers headers{{"Content-Type", "application/json"}};
    if (!endpoint.api_key_env.empty()) {
        if (const char* key = std::getenv(endpoint.api_key_env.c_str()); key && *key) {
            headers.emplace_back("Authorization", std::string("Bearer ") + key);
        }
    }
    return headers;
}

class HttplibTransport final : public Transport {
public:
    explicit HttplibTransport(const BackendEndpoint& endpoint)
        : host_(split_base_url(endpoint.base_url).first), timeout_(endpoint.timeout) {}

    HttpResponse post(const std::string& path, const std::string& body,
                      const Headers& headers) override {
        httplib::Client client(host_);
        const auto secs = std::chrono::duration_cast<std::chrono::seconds>(timeout_);
        const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(timeout_ - secs);
        client.set_connection_timeout(secs.count(), usecs.count());
        client.set_read_timeout(secs.count(), usecs.count());
        client.set_write_timeout(secs.count(), usecs.count());
        httplib::Headers hdrs;
        std::string content_type = "application/json";
        for (const auto& [k, v] : headers) {
            if (k == "Content-Type") content_type = v;
            else hdrs.emplace(k, v);
        }
        auto result = client.Post(path, hdrs, body, content_type);
        if (!result) {
            throw BackendError(BackendErrorKind::Transport,
                               "POST " + host_ + path + " failed: " + httplib::to_string(result.error()));
        }
        return HttpResponse{result->status, result->body};
    }

private:
    std::string host_;
    std::chrono::milliseconds timeout_;
};

nlohmann::json parse_body(const HttpResponse& response, const std::string& what) {
    try {
        return nlohmann::json::parse(response.body);
    } catch (const nlohmann::json::parse_error&) {
        throw BackendError(BackendErrorKind::MalformedResponse, what + ": response body is not JSON");
    }
}

double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    const double denom = a.norm() * b.norm();
    if (denom == 0.0) return 0.0;
    return std::clamp(a.dot(b) / denom, -1.0, 1.0);
}

std::string shell_quote(std::string_view s) {
    std::string out = "'";
    for (char c : s) {
        if (c == '\'') out += "'\\''";
        else out.push_back(c);
    }
    out.push_back('\'');
    return out;
}

}  // namespace

const char* to_string(ModelRole role) {
    return role == ModelRole::Rewriter ? "rewriter" : "responder";
}

std::vector<std::string> generate_many(TextGenerator& generator, const std::string& prompt,
                                       std::span<const double> temperatures,
                                       const GenerationParams& base, int parallelism) {
    const std::size_t n = temperatures.size();
    if (n == 0) throw ConfigError("generate_many: at least one temperature is required");
    const std::size_t wave = static_cast<std::size_t>(std::max(1, parallelism));
    std::vector<std::string> out(n);
    for (std::size_t begin = 0; begin < n; begin += wave) {
        const std::size_t end = std::min(n, begin + wave);
        std::vector<std::future<std::string>> pending;
        for (std::size_t i = begin; i < end; ++i) {
            GenerationParams params = base;
            params.temperature = temperatures[i];
            auto call = [&generator, &prompt, params] { return generator.generate(prompt, params); };
            pending.push_back(end - begin == 1 ? std::async(std::launch::deferred, call)
                                               : std::async(std::launch::async, call));
        }
        std::optional<std::pair<std::size_t, std::exception_ptr>> failure;
        for (std::size_t i = begin; i < end; ++i) {
            try {
                out[i] = pending[i - begin].get();
            } catch (...) {
                if (!failure) failure.emplace(i, std::current_exception());
            }
        }
        if (failure) {
            const std::string index = std::to_string(failure->first);
            try {
                std::rethrow_exception(failure->second);
            } catch (const BackendError& e) {
                throw BackendError(e.kind(), "generate_many: request " + index + " failed: " + e.what(),
                                   e.status());
            } catch (const std::exception& e) {
                throw BackendError(BackendErrorKind::Transport,
                                   "generate_many: request " + index + " failed: " + e.what());
            }
        }
    }
    return out;
}

void BackendEndpoint::check() const {
    if (base_url.empty()) throw ConfigError("endpoint: base_url is required");
    if (max_retries < 0) throw ConfigError("endpoint: max_retries must be >= 0");
    if (timeout.count() <= 0) throw ConfigError("endpoint: timeout must be positive");
    if (backoff_base.count() < 0) throw ConfigError("endpoint: backoff must be >= 0");
}

std::shared_ptr<Transport> make_http_transport(const BackendEndpoint& endpoint) {
    endpoint.check();
    return std::make_shared<HttplibTransport>(endpoint);
}

Sleeper real_sleeper() {
    return [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
}

std::string endpoint_path_prefix(const std::string& base_url) {
    return split_base_url(base_url).second;
}

HttpResponse post_with_retry(Transport& transport, const std::string& path,
                             const std::string& body, const Headers& headers,
                             const BackendEndpoint& endpoint, const Sleeper& sleep) {
    std::string last_failure;
    for (int attempt = 0;; ++attempt) {
        try {
            HttpResponse response = transport.post(path, body, headers);
            if (response.status >= 200 && response.status < 300) return response;
            if (!retryable(response.status)) {
                throw BackendError(BackendErrorKind::HttpStatus,
                                   "POST " + path + " returned status " +
                                       std::to_string(response.status),
                                   response.status);
            }
            last_failure = "status " + std::to_string(response.status);
        } catch (const BackendError& e) {
            if (e.kind() != BackendErrorKind::Transport) throw;
            last_failure = e.what();
        }
        if (attempt >= endpoint.max_retries) {
            throw BackendError(BackendErrorKind::RetriesExhausted,
                               "POST " + path + " failed after " + std::to_string(attempt + 1) +
                                   " attempts (last: " + last_failure + ")");
        }
        sleep(endpoint.backoff_base * (1LL << std::min(attempt, 20)));
    }
}

HttpGenerator::HttpGenerator(BackendEndpoint endpoint, std::shared_ptr<Transport> transport,
                             Sleeper sleep)
    : endpoint_(std::move(endpoint)), transport_(std::move(transport)), sleep_(std::move(sleep)) {
    endpoint_.check();
}

nlohmann::json HttpGenerator::request_body(const std::string& model, const std::string& prompt,
                                           const GenerationParams& params) {
    nlohmann::json body = {
        {"model", model},
        {"messages", nlohmann::json::array({{{"role", "user"}, {"content", prompt}}})},
        {"temperature", params.temperature},
        {"max_tokens", params.max_tokens},
    };
    if (!params.stop.empty()) body["stop"] = params.stop;
    if (params.seed) body["seed"] = *params.seed;
    return body;
}

std::string HttpGenerator::generate(const std::string& prompt, const GenerationParams& params) {
    if (prompt.empty()) throw ConfigError("generate: prompt must be non-empty");
    if (params.max_tokens < 1) throw ConfigError("generate: max_tokens must be >= 1");
    const std::string path = endpoint_path_prefix(endpoint_.base_url) + "/chat/completions";
    const auto response = post_with_retry(*transport_, path,
                                          request_body(endpoint_.model, prompt, params).dump(),
                                          auth_headers(endpoint_), endpoint_, sleep_);
    const auto json = parse_body(response, "chat completion");
    try {
        return trim(json.at("choices").at(0).at("message").at("content").get<std::string>());
    } catch (const nlohmann::json::exception&) {
        throw BackendError(BackendErrorKind::MalformedResponse,
                           "chat completion: missing choices[0].message.content");
    }
}

HttpGeneratorFactory::HttpGeneratorFactory(BackendEndpoint endpoint,
                                           std::shared_ptr<Transport> transport, Sleeper sleep)
    : endpoint_(std::move(endpoint)), transport_(std::move(transport)), sleep_(std::move(sleep)) {}

std::shared_ptr<TextGenerator> HttpGeneratorFactory::for_model(const std::string& model_id) {
    BackendEndpoint endpoint = endpoint_;
    endpoint.model = model_id;
    return std::make_shared<HttpGenerator>(std::move(endpoint), transport_, sleep_);
}

Eigen::MatrixXd http_embed(Transport& transport, const BackendEndpoint& endpoint,
                           const std::vector<std::string>& inputs, const Sleeper& sleep) {
    const std::string path = endpoint_path_prefix(endpoint.base_url) + "/embeddings";
    const nlohmann::json request = {{"model", endpoint.model}, {"input", inputs}};
    const auto response =
        post_with_retry(transport, path, request.dump(), auth_headers(endpoint), endpoint, sleep);
    const auto json = parse_body(response, "embeddings");
    if (!json.contains("data") || !json.at("data").is_array()) {
        throw BackendError(BackendErrorKind::MalformedResponse, "embeddings: missing data array");
    }
    const auto& data = json.at("data");
    if (data.size() != inputs.size()) {
        throw BackendError(BackendErrorKind::CountMismatch,
                           "embeddings: expected " + std::to_string(inputs.size()) +
                               " vectors, got " + std::to_string(data.size()));
    }
    Eigen::MatrixXd out;
    for (std::size_t row = 0; row < data.size(); ++row) {
        // Entries carry an "index"; place by it when present.
        const auto& item = data[row];
        std::size_t slot = row;
        std::vector<double> values;
        try {
            if (item.contains("index")) slot = item.at("index").get<std::size_t>();
            values = item.at("embedding").get<std::vector<double>>();
        } catch (const nlohmann::json::exception&) {
            throw BackendError(BackendErrorKind::MalformedResponse,
                               "embeddings: malformed entry " + std::to_string(row));
        }
        if (slot >= inputs.size()) {
            throw BackendError(BackendErrorKind::MalformedResponse, "embeddings: index out of range");
        }
        if (row == 0) out.resize(static_cast<Eigen::Index>(inputs.size()),
                                 static_cast<Eigen::Index>(values.size()));
        if (static_cast<Eigen::Index>(values.size()) != out.cols() || values.empty()) {
            throw BackendError(BackendErrorKind::DimensionDrift,
                               "embeddings: inconsistent vector dimensions in one response");
        }
        out.row(static_cast<Eigen::Index>(slot)) =
            Eigen::Map<const Eigen::RowVectorXd>(values.data(), out.cols());
    }
    return out;
}

HttpEmbedder::HttpEmbedder(BackendEndpoint endpoint, std::shared_ptr<Transport> transport,
                           int expected_dim, Sleeper sleep)
    : endpoint_(std::move(endpoint)),
      transport_(std::move(transport)),
      sleep_(std::move(sleep)),
      dim_(expected_dim) {
    endpoint_.check();
}

Eigen::MatrixXd HttpEmbedder::embed_turns(const DialogueContext& context) {
    if (context.size() < 1) throw DataError("embed_turns: context has no turns");
    const auto ordinals = speaker_ordinals(context);
    std::vector<std::string> lines;
    for (const Turn& turn : context.turns) {
        lines.push_back("Speaker " + std::to_string(ordinals.at(turn.speaker)) + ": " + turn.text);
    }
    Eigen::MatrixXd out = http_embed(*transport_, endpoint_, lines, sleep_);
    if (out.cols() != dim_) {
        throw BackendError(BackendErrorKind::DimensionDrift,
                           "embed_turns: expected dimension " + std::to_string(dim_) + ", got " +
                               std::to_string(out.cols()));
    }
    return out;
}

HttpSimilarity::HttpSimilarity(BackendEndpoint endpoint, std::shared_ptr<Transport> transport,
                               Sleeper sleep)
    : endpoint_(std::move(endpoint)), transport_(std::move(transport)), sleep_(std::move(sleep)) {
    endpoint_.check();
}

double HttpSimilarity::similarity(std::string_view a, std::string_view b) {
    if (a == b) return 1.0;
    const Eigen::MatrixXd vecs =
        http_embed(*transport_, endpoint_, {std::string(a), std::string(b)}, sleep_);
    return cosine(vecs.row(0).transpose(), vecs.row(1).transpose());
}

std::string CommandTrainerHook::train(const TrainRequest& request) {
    namespace fs = std::filesystem;
    std::random_device rd;
    const fs::path err_path =
        fs::temp_directory_path() / ("dialign-trainer-" + std::to_string(rd()) + std::to_string(rd()) + ".err");
    std::ostringstream cmd;
    cmd << command_ << ' ' << shell_quote(request.preference_file.string()) << ' '
        << shell_quote(request.base_model) << ' ' << to_string(request.role) << ' '
        << request.round << ' ' << shell_quote(request.params.dump()) << " 2>"
        << shell_quote(err_path.string());
    FILE* pipe = ::popen(cmd.str().c_str(), "r");
    if (!pipe) {
        throw BackendError(BackendErrorKind::TrainerFailure, "trainer: could not start command");
    }
    std::string output;
    char buffer[4096];
    while (std::size_t n = std::fread(buffer, 1, sizeof buffer, pipe)) output.append(buffer, n);
    const int status = ::pclose(pipe);
    std::string diagnostics;
    {
        std::ifstream err(err_path);
        std::ostringstream ss;
        ss << err.rdbuf();
        diagnostics = trim(ss.str());
    }
    std::error_code ec;
    fs::remove(err_path, ec);
    const int code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    if (code != 0) {
        throw BackendError(BackendErrorKind::TrainerFailure,
                           "trainer exited with status " + std::to_string(code) + ": " +
                               (diagnostics.empty() ? trim(output) : diagnostics));
    }
    std::string last;
    std::istringstream lines(output);
    for (std::string line; std::getline(lines, line);) {
        if (auto t = trim(line); !t.empty()) last = std::move(t);
    }
    if (last.empty()) {
        throw BackendError(BackendErrorKind::TrainerFailure, "trainer produced no model id");
    }
    if (last.find_first_of(" \t") != std::string::npos) {
        throw BackendError(BackendErrorKind::TrainerFailure,
                           "trainer output is not a model id: '" + last + "'");
    }
    return last;
}

}  // namespace dialign
