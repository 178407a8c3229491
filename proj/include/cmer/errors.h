// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace cmer {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shape or axis violation in a tensor operation.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// A caller broke an operation's precondition.
class ContractError : public Error {
public:
    using Error::Error;
};

/// Operation invoked in the wrong lifecycle state (e.g. second backward).
class StateError : public Error {
public:
    using Error::Error;
};

class VocabularyError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration, detected at construction time.
class ConfigError : public Error {
public:
    using Error::Error;
};

class ParseError : public Error {
public:
    using Error::Error;
};

/// Well-formed input that fails a semantic check.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// NaN/Inf encountered in losses or gradients.
class NumericError : public Error {
public:
    using Error::Error;
};

class DegenerateInputError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace cmer
