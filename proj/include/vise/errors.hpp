#pragma once

#include <stdexcept>
#include <string>

namespace vise {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class BoundsError : public Error { using Error::Error; };
class ShapeError : public Error { using Error::Error; };
class CodecError : public Error { using Error::Error; };
/// iou() of two empty masks; the metrics layer never asks for it.
class EmptyIouError : public Error { using Error::Error; };
class ManifestError : public Error { using Error::Error; };
class SamplingError : public Error { using Error::Error; };
class TemplateError : public Error { using Error::Error; };
class ParseError : public Error { using Error::Error; };
class MetricError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class FixtureError : public Error { using Error::Error; };
class IoError : public Error { using Error::Error; };

/// Malformed or out-of-contract payload from a remote tool. Not retryable.
class ProtocolError : public Error { using Error::Error; };

/// Network failure or 5xx after all retries. Carries the endpoint it hit.
class TransportError : public Error {
public:
    TransportError(std::string endpoint, const std::string& what)
        : Error(what), endpoint_(std::move(endpoint)) {}
    const std::string& endpoint() const noexcept { return endpoint_; }

private:
    std::string endpoint_;
};

}  // namespace vise
