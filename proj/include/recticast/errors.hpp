#pragma once

#include <stdexcept>
#include <string>

namespace recticast {

/// Shape or rank mismatch between operands.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// NaN/Inf encountered where a finite value is required.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed on-disk data (tensor container, manifest, CSV).
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid or inconsistent configuration.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A required earlier artifact (checkpoint, dataset) is missing.
class PrerequisiteError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A documented runtime contract was broken (e.g. training against an unfrozen backbone).
class InvariantError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

}  // namespace recticast
