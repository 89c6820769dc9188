#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace masqlab {

// Error taxonomy mirrors the CLI exit codes:
//   ConfigError -> 2, StateError -> 3, NumericError -> 4.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Bad configuration: invalid flags, out-of-range hyperparameters,
// unknown vocabulary words, adapter/projection shape mismatches.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Missing or inconsistent persisted state: absent checkpoints,
// non-empty output directories, corrupt artifact files.
class StateError : public Error {
public:
    using Error::Error;
};

// Numeric failures: diverged training, undefined cosine, degenerate
// statistics.
class NumericError : public Error {
public:
    using Error::Error;
};

// Malformed container/dataset files. Carries the byte offset at which
// parsing failed.
class ParseError : public StateError {
public:
    ParseError(const std::string& what, std::uint64_t offset)
        : StateError(what + " (at byte offset " + std::to_string(offset) + ")"),
          offset_(offset) {}

    std::uint64_t offset() const { return offset_; }

private:
    std::uint64_t offset_;
};

}  // namespace masqlab
