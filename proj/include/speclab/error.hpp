// Copyright 2026 The speclab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace speclab {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shape or extent mismatch.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Index outside the valid range of a tensor, table or mask.
class IndexError : public Error {
public:
    using Error::Error;
};

/// Caller supplied arguments that violate an operation's precondition.
class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// A query row with no admissible key.
class DegenerateRowError : public Error {
public:
    using Error::Error;
};

/// Training diverged (NaN/inf loss).
class DivergenceError : public Error {
public:
    using Error::Error;
};

/// Broken internal invariant; indicates a bug rather than bad input.
class InternalError : public Error {
public:
    using Error::Error;
};

/// Malformed file or wire data.
class FormatError : public Error {
public:
    using Error::Error;
};

}  // namespace speclab
