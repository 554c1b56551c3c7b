// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace kgfuse {

enum class ErrorKind {
  kInvalidArgument,
  kParse,
  kIo,
  kShape,
  kNotFound,
  kSaturated,
  kDiverged,
  kFormat,
};

// Single exception type for the library; `kind()` lets callers map failures
// to exit codes without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace kgfuse
