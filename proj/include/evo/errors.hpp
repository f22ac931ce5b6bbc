// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace evo {

// Process exit codes reported by the CLI. Each error class below maps to one.
enum class ExitCode : int {
    ok = 0,
    failure = 1,
    validation = 2,
    backend = 3,
    format = 4,
};

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
    virtual ExitCode exit_code() const { return ExitCode::failure; }
};

/// Bad input: invalid config values, schema violations, precondition failures.
class ValidationError : public Error {
public:
    using Error::Error;
    ExitCode exit_code() const override { return ExitCode::validation; }
};

/// File-system problems (missing path, unwritable output).
class IoError : public Error {
public:
    using Error::Error;
    ExitCode exit_code() const override { return ExitCode::validation; }
};

/// A generation backend failed: transport errors, exhausted retries,
/// unmatched scripted prompts, empty completions.
class BackendError : public Error {
public:
    using Error::Error;
    ExitCode exit_code() const override { return ExitCode::backend; }
};

/// A completion could not be parsed into the structure an operation requires
/// (missing answer delimiter, malformed judge verdict, out-of-range score).
class FormatError : public Error {
public:
    using Error::Error;
    ExitCode exit_code() const override { return ExitCode::format; }
};

} // namespace evo
