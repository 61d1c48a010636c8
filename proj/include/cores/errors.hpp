#pragma once

#include <stdexcept>
#include <string>

namespace cores {

// Invalid configuration supplied by a caller (bad level count, k out of range).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Filesystem access failed.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

// File content could not be parsed; message names the offending location.
struct ParseError : std::runtime_error {
    explicit ParseError(const std::string& what) : std::runtime_error(what) {}
};

// Text cannot be represented in the vocabulary, or token ids are out of range.
struct VocabError : std::runtime_error {
    explicit VocabError(const std::string& what) : std::runtime_error(what) {}
};

// A generated reasoning chain exposed fewer special-token positions than the
// configured level count; callers fall back to a degraded single-level decode.
struct ChainDegradationError : std::runtime_error {
    explicit ChainDegradationError(const std::string& what) : std::runtime_error(what) {}
};

// Synthetic scene construction could not satisfy its invariants within the
// retry budget (typically an infeasible size configuration).
struct GenerationError : std::runtime_error {
    explicit GenerationError(const std::string& what) : std::runtime_error(what) {}
};

// A registered parameter did not fall into exactly one frozen/trainable
// category, or its stored flag contradicts its category.
struct PartitionError : std::runtime_error {
    explicit PartitionError(const std::string& what) : std::runtime_error(what) {}
};

// The optimizer hit an unrecoverable state; the message carries the loss
// breakdown at the failing step.
struct TrainingError : std::runtime_error {
    explicit TrainingError(const std::string& what) : std::runtime_error(what) {}
};

} // namespace cores
