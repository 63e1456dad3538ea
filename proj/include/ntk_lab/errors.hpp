#ifndef NTK_LAB_ERRORS_HPP
#define NTK_LAB_ERRORS_HPP

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ntk_lab {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Precondition violation: wrong shapes, out-of-range parameters, non-finite data.
class InvalidInput : public Error {
public:
    using Error::Error;
};

/// Malformed text input. `line()` is 1-based; 0 means "no particular line".
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line)
        : Error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// A computation that cannot produce a meaningful result (divergence, singular systems).
class NumericalError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// Configuration document rejected by the schema; `path()` is a JSON pointer.
class ConfigError : public Error {
public:
    ConfigError(std::string path, const std::string& what)
        : Error(path + ": " + what), path_(std::move(path)), message_(what) {}

    const std::string& path() const noexcept { return path_; }
    const std::string& message() const noexcept { return message_; }

private:
    std::string path_;
    std::string message_;
};

}  // namespace ntk_lab

#endif
