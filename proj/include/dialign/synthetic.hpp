#pragma once

#include <cstdint>
#include <vector>

#include "dialign/corpus.hpp"

namespace dialign {

/// Random multi-party contexts with known reply links. Each context draws a
/// marker rate in [marked_min, marked_max]; every turn after the first is
/// prefixed with the '@' address marker with that probability, so contexts
/// span a range of planted-signal strengths.
struct SyntheticConfig {
    int contexts = 100;
    int min_turns = 2;
    int max_turns = 8;
    int speakers = 4;
    double marked_min = 0.0;
    double marked_max = 1.0;
    std::uint64_t seed = 0;
};

std::vector<DialogueContext> synthetic_corpus(const SyntheticConfig& config);

}  // namespace dialign
