#pragma once

#include <stdexcept>
#include <string>

namespace tensornet {

// Every precondition violation and malformed input is reported through this
// type so callers (CLI, tests) can catch library errors in one place.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string &what) : std::runtime_error(what) {}
};

// Raised by parsers; carries the 1-based line where parsing failed.
class ParseError : public Error {
public:
  ParseError(const std::string &what, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

private:
  std::size_t line_;
};

} // namespace tensornet
