#pragma once

#include <stdexcept>
#include <string>

namespace cma {

// Shape disagreement between operands (reports both shapes in the message).
struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

// Math domain violation (log of non-positive, etc.).
struct DomainError : std::runtime_error {
    explicit DomainError(const std::string& msg) : std::runtime_error(msg) {}
};

// API contract violation (non-scalar loss, empty batch, ...).
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Token index outside the vocabulary.
struct VocabularyError : std::runtime_error {
    explicit VocabularyError(const std::string& msg) : std::runtime_error(msg) {}
};

// Operation received an empty input it cannot handle.
struct EmptyInputError : std::runtime_error {
    explicit EmptyInputError(const std::string& msg) : std::runtime_error(msg) {}
};

// Training produced a non-finite value; carries the offending step.
struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

// Checkpoint or corpus file failed to parse.
struct CorruptArtifactError : std::runtime_error {
    explicit CorruptArtifactError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace cma
