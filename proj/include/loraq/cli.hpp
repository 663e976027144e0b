#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "loraq/error.hpp"

namespace loraq {

// Exit codes. Stable: scripts may rely on them.
inline constexpr int kExitOk = 0;
inline constexpr int kExitInternal = 1;
inline constexpr int kExitUsage = 2;

/// 10 + the ErrorCode ordinal: SHAPE_ERROR 10, PARAMETER_ERROR 11, CONVERGENCE_ERROR 12,
/// NUMERIC_ERROR 13, LOOKUP_ERROR 14, FORMAT_ERROR 15, CORRUPT_FILE 16, VERSION_ERROR 17,
/// BUDGET_ERROR 18, PRECONDITION_ERROR 19, IO_ERROR 20.
int exit_code_for(ErrorCode code) noexcept;

/// Runs one command line (without the program name). Results go to `out`, warnings and
/// the single-line error record to `err`.
int run_cli(const std::vector<std::string> &args, std::ostream &out, std::ostream &err);

} // namespace loraq
