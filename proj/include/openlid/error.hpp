// Copyright 2026 The OpenLID Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace openlid {

/// Broad failure category. The CLI maps these onto process exit codes.
enum class ErrorKind {
  usage,        // bad arguments or configuration values
  format,       // malformed or unsupported file contents
  corrupt,      // truncated / internally inconsistent file
  io,           // filesystem failure
  lookup,       // unknown id or key
  data,         // well-formed input that violates a precondition
  numeric,      // NaN/Inf during computation
  internal,     // broken invariant inside the library
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::usage: return "usage error";
    case ErrorKind::format: return "format error";
    case ErrorKind::corrupt: return "corrupt file";
    case ErrorKind::io: return "I/O error";
    case ErrorKind::lookup: return "lookup error";
    case ErrorKind::data: return "data error";
    case ErrorKind::numeric: return "numeric error";
    case ErrorKind::internal: return "internal error";
  }
  return "error";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

}  // namespace openlid
