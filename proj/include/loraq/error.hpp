#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace loraq {

enum class ErrorCode : std::uint8_t {
  Shape,
  Parameter,
  Convergence,
  Numeric,
  Lookup,
  Format,
  CorruptFile,
  Version,
  Budget,
  Precondition,
  Io,
};

/// Stable machine-readable name, e.g. "SHAPE_ERROR".
const char *error_code_name(ErrorCode code) noexcept;

class Error : public std::runtime_error {
public:
  Error(ErrorCode code, const std::string &what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

private:
  ErrorCode code_;
};

/// Non-convergence of an iterative kernel; carries the residual it reached.
class ConvergenceError : public Error {
public:
  ConvergenceError(const std::string &what, double residual)
      : Error(ErrorCode::Convergence, what), residual_(residual) {}
  double residual() const noexcept { return residual_; }

private:
  double residual_;
};

/// Truncated or inconsistent file; `offset` is the byte where reading failed.
class CorruptFileError : public Error {
public:
  CorruptFileError(const std::string &what, std::uint64_t offset)
      : Error(ErrorCode::CorruptFile, what + " (at byte " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

private:
  std::uint64_t offset_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string &what) { throw Error(code, what); }

} // namespace loraq
