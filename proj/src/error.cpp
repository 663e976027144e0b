#include "loraq/error.hpp"

namespace loraq {

const char *error_code_name(ErrorCode code) noexcept {
  switch (code) {
  case ErrorCode::Shape: return "SHAPE_ERROR";
  case ErrorCode::Parameter: return "PARAMETER_ERROR";
  case ErrorCode::Convergence: return "CONVERGENCE_ERROR";
  case ErrorCode::Numeric: return "NUMERIC_ERROR";
  case ErrorCode::Lookup: return "LOOKUP_ERROR";
  case ErrorCode::Format: return "FORMAT_ERROR";
  case ErrorCode::CorruptFile: return "CORRUPT_FILE";
  case ErrorCode::Version: return "VERSION_ERROR";
  case ErrorCode::Budget: return "BUDGET_ERROR";
  case ErrorCode::Precondition: return "PRECONDITION_ERROR";
  case ErrorCode::Io: return "IO_ERROR";
  }
  return "UNKNOWN_ERROR";
}

} // namespace loraq
