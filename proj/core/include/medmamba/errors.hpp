#pragma once

#include <stdexcept>
#include <string>

namespace medmamba {

// Extents of one or more tensors do not line up.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// A structural setting (groups, class count, divisibility) is unusable.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// An object is used in a state that does not support the request.
class StateError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

// A numeric argument lies outside the domain of the operation.
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

// A contract of the operation (e.g. time invariance) is violated.
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

// On-disk data is malformed, truncated or of the wrong version.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace medmamba
