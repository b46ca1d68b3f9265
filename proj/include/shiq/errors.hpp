#pragma once

#include <stdexcept>
#include <string>

namespace shiq {

/// Operation called outside its mathematical domain (inadmissible action, bad time index, ...).
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Malformed configuration or input data.
class ValidationError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Enumeration or memory cap exceeded.
class ResourceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Unparseable file content; carries the 1-based line number when known.
class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& what, std::size_t line = 0)
        : std::runtime_error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class UnsupportedError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

} // namespace shiq
