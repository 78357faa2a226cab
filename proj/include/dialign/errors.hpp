#pragma once

#include <stdexcept>
#include <string>

namespace dialign {

// Error families map one-to-one onto the CLI exit codes (2, 3, 4, 5).

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class BackendErrorKind {
    Transport,
    RetriesExhausted,
    HttpStatus,
    MalformedResponse,
    CountMismatch,
    DimensionDrift,
    Unscripted,
    TrainerFailure,
};

const char* to_string(BackendErrorKind kind);

class BackendError : public std::runtime_error {
public:
    BackendError(BackendErrorKind kind, const std::string& what, int status = 0)
        : std::runtime_error(what), kind_(kind), status_(status) {}

    BackendErrorKind kind() const noexcept { return kind_; }
    int status() const noexcept { return status_; }

private:
    BackendErrorKind kind_;
    int status_;
};

}  // namespace dialign
