#pragma once

#include <stdexcept>
#include <string>

namespace pmae {

// Invalid configuration or inputs that can never succeed (CLI exit code 2).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Tensor shapes that do not agree with the operation contract.
class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Filesystem and checkpoint failures.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A loss term became NaN/Inf during training.
class NonFiniteLossError : public std::runtime_error {
public:
    NonFiniteLossError(std::string term, const std::string& detail)
        : std::runtime_error(detail), term_(std::move(term)) {}
    const std::string& term() const noexcept { return term_; }

private:
    std::string term_;
};

} // namespace pmae
