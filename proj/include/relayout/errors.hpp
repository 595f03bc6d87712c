// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace relayout {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed user input: layouts, job specs, prompts, hyperparameters.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Unknown layer ids, inconsistent tap configuration.
class ConfigurationError : public Error {
public:
    using Error::Error;
};

/// A callback or caller broke an interface contract (e.g. wrong replacement shape).
class ContractViolation : public Error {
public:
    using Error::Error;
};

class OutOfRangeError : public Error {
public:
    using Error::Error;
};

/// Backend selection, construction or identity mismatch.
class BackendError : public Error {
public:
    using Error::Error;
};

class DecodeError : public Error {
public:
    using Error::Error;
};

/// Persisted artifact could not be loaded (integrity, format, backend mismatch).
class LoadError : public Error {
public:
    using Error::Error;
};

/// Thrown out of a running job when cancellation was requested between steps.
class CancelledError : public Error {
public:
    CancelledError() : Error("cancelled") {}
};

}  // namespace relayout
