#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace pymx {

// Error classes map one-to-one onto CLI exit codes (see exit_code()).
enum class ErrorKind {
    internal,
    config,
    data,
    divergence,
    format,
    dimension,
    state,
    contract,
};

std::string_view to_string(ErrorKind kind) noexcept;

/// Process exit code used by the command-line tool for an error class.
int exit_code(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& m) : Error(ErrorKind::config, m) {}
};

class DataError : public Error {
public:
    explicit DataError(const std::string& m) : Error(ErrorKind::data, m) {}
};

class DivergenceError : public Error {
public:
    explicit DivergenceError(const std::string& m) : Error(ErrorKind::divergence, m) {}
};

class FormatError : public Error {
public:
    explicit FormatError(const std::string& m) : Error(ErrorKind::format, m) {}
};

class DimensionError : public Error {
public:
    explicit DimensionError(const std::string& m) : Error(ErrorKind::dimension, m) {}
};

class SequenceTooShortError : public DimensionError {
public:
    explicit SequenceTooShortError(const std::string& m) : DimensionError(m) {}
};

class StateError : public Error {
public:
    explicit StateError(const std::string& m) : Error(ErrorKind::state, m) {}
};

class ContractError : public Error {
public:
    explicit ContractError(const std::string& m) : Error(ErrorKind::contract, m) {}
};

}  // namespace pymx
