#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace recprompt {

/// Base class for all errors raised by this library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A value violates a documented invariant (bad template, bad request, ...).
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Bad configuration: missing credential, negative weight, unusable merge map.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Requested sample sizes exceed what the data provides.
class SizingError : public Error {
public:
    using Error::Error;
};

/// Input breaks the evaluation protocol (no positive, empty aggregate, ...).
class ProtocolError : public Error {
public:
    using Error::Error;
};

/// The optimizer's answer carries no extractable template.
class ExtractionError : public Error {
public:
    using Error::Error;
};

/// Transport or backend failure surfaced after retries.
class GatewayError : public Error {
public:
    using Error::Error;
};

/// Replay backend found no cached response for a request.
class CacheMissError : public GatewayError {
public:
    explicit CacheMissError(const std::string& key)
        : GatewayError("cache miss for key " + key), key_(key) {}
    const std::string& key() const { return key_; }

private:
    std::string key_;
};

/// All attempts of one optimization step failed; raw outputs are kept for diagnosis.
class OptimizationStepError : public Error {
public:
    OptimizationStepError(const std::string& what, std::vector<std::string> raw_outputs)
        : Error(what), raw_outputs_(std::move(raw_outputs)) {}
    const std::vector<std::string>& raw_outputs() const { return raw_outputs_; }

private:
    std::vector<std::string> raw_outputs_;
};

/// The evaluator's answer contains neither a YES nor a NO token.
class JudgeParseError : public Error {
public:
    using Error::Error;
};

/// A score's denominator is empty (no topic instances, no usable histories).
class UndefinedScoreError : public Error {
public:
    using Error::Error;
};

} // namespace recprompt
