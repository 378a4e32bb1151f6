// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace gistlm {

/// Base class for all errors raised by this library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A raw-token length is not divisible by the compression ratio (or chunk length).
class NonDivisibleLength : public Error {
public:
    using Error::Error;
};

class IndexOutOfRange : public Error {
public:
    using Error::Error;
};

class ShapeMismatch : public Error {
public:
    using Error::Error;
};

/// A block layout does not match the tensors it is applied to.
class LayoutMismatch : public Error {
public:
    using Error::Error;
};

class InvalidChunkSize : public Error {
public:
    using Error::Error;
};

/// A decode session's cache and state disagree.
class InconsistentState : public Error {
public:
    using Error::Error;
};

/// Malformed configuration (JSON or field constraints).
class ConfigError : public Error {
public:
    using Error::Error;
};

}  // namespace gistlm
