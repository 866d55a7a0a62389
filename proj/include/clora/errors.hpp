// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace clora {

// Each error carries a stable kind string so the CLI can emit it as JSON.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(what), kind_(std::move(kind)) {}
    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& what) : Error("shape", what) {}
};
struct NumericError : Error {
    explicit NumericError(const std::string& what) : Error("numeric", what) {}
};
struct DomainError : Error {
    explicit DomainError(const std::string& what) : Error("domain", what) {}
};
struct UsageError : Error {
    explicit UsageError(const std::string& what) : Error("usage", what) {}
};
struct IndexError : Error {
    explicit IndexError(const std::string& what) : Error("index", what) {}
};
struct IoError : Error {
    explicit IoError(const std::string& what) : Error("io", what) {}
};
struct TrainingError : Error {
    explicit TrainingError(const std::string& what) : Error("training", what) {}
};

}  // namespace clora
