#pragma once

#include <stdexcept>
#include <string>

namespace hadamrnn {

enum class ErrorKind {
  invalid_order,
  shape,
  invalid_bitwidth,
  invalid_argument,
  overflow,
  config,
  data,
  numerical,
  io,
};

/// Single exception type for the library; the kind selects the CLI exit code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline int exit_code(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::config:
    case ErrorKind::invalid_argument:
    case ErrorKind::invalid_bitwidth:
    case ErrorKind::invalid_order:
    case ErrorKind::shape:
      return 2;
    case ErrorKind::data:
    case ErrorKind::io:
      return 3;
    case ErrorKind::numerical:
    case ErrorKind::overflow:
      return 4;
  }
  return 1;
}

namespace detail {
inline void require(bool cond, ErrorKind kind, const std::string& msg) {
  if (!cond) throw Error(kind, msg);
}
}  // namespace detail

}  // namespace hadamrnn
