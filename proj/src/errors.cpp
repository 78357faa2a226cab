#include "dialign/errors.hpp"

namespace dialign {

const char* to_string(BackendErrorKind kind) {
    switch (kind) {
        case BackendErrorKind::Transport: return "transport";
        case BackendErrorKind::RetriesExhausted: return "retries-exhausted";
        case BackendErrorKind::HttpStatus: return "http-status";
        case BackendErrorKind::MalformedResponse: return "malformed-response";
        case BackendErrorKind::CountMismatch: return "count-mismatch";
        case BackendErrorKind::DimensionDrift: return "dimension-drift";
        case BackendErrorKind::Unscripted: return "unscripted";
        case BackendErrorKind::TrainerFailure: return "trainer-failure";
    }
    return "unknown";
}

}  // namespace dialign
