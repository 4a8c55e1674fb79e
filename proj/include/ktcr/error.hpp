#pragma once

#include <stdexcept>
#include <string>

namespace ktcr {

/// Base of every error raised by the library. `error_class()` is a stable
/// machine-readable tag; `exit_code()` is what the CLI returns for it.
class Error : public std::runtime_error {
public:
    Error(std::string error_class, int exit_code, const std::string& what)
        : std::runtime_error(what), error_class_(std::move(error_class)), exit_code_(exit_code)
    {}

    const std::string& error_class() const noexcept { return error_class_; }
    int exit_code() const noexcept { return exit_code_; }

private:
    std::string error_class_;
    int exit_code_;
};

inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumeric = 4;

// Configuration and argument errors (exit 2).
struct ParameterError : Error {
    explicit ParameterError(const std::string& w) : Error("parameter_error", kExitConfig, w) {}
};
struct ConfigError : Error {
    explicit ConfigError(const std::string& w) : Error("config_error", kExitConfig, w) {}
};

// Data errors (exit 3).
struct DataError : Error {
    explicit DataError(const std::string& w, std::string cls = "data_error")
        : Error(std::move(cls), kExitData, w)
    {}
};
struct InsufficientDataError : DataError {
    explicit InsufficientDataError(const std::string& w) : DataError(w, "insufficient_data") {}
};
struct DegenerateDataError : DataError {
    explicit DegenerateDataError(const std::string& w) : DataError(w, "degenerate_data") {}
};
struct ShapeError : DataError {
    explicit ShapeError(const std::string& w) : DataError(w, "shape_error") {}
};
struct ParseError : DataError {
    ParseError(const std::string& w, std::size_t line)
        : DataError(w, "parse_error"), line_(line)
    {}
    std::size_t line() const noexcept { return line_; }
private:
    std::size_t line_;
};
struct SchemaError : DataError {
    SchemaError(const std::string& w, std::size_t line)
        : DataError(w, "schema_error"), line_(line)
    {}
    std::size_t line() const noexcept { return line_; }
private:
    std::size_t line_;
};
struct UnknownLabelError : DataError {
    explicit UnknownLabelError(const std::string& w) : DataError(w, "unknown_label") {}
};
struct UndefinedMetricError : DataError {
    explicit UndefinedMetricError(const std::string& w) : DataError(w, "undefined_metric") {}
};

// Numeric errors (exit 4).
struct NumericError : Error {
    explicit NumericError(const std::string& w, std::string cls = "numeric_error")
        : Error(std::move(cls), kExitNumeric, w)
    {}
};
struct DegenerateDirectionError : NumericError {
    explicit DegenerateDirectionError(const std::string& w)
        : NumericError(w, "degenerate_direction")
    {}
};

} // namespace ktcr
