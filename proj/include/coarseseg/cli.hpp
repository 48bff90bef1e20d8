#pragma once

#include <filesystem>

namespace coarseseg::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

/// Entry point of the coarseseg command. Errors go to stderr as one line
/// "error[CODE]: message"; the return value is the process exit code.
int run(int argc, const char* const* argv);

/// Relative output paths are placed under $COARSESEG_OUTPUT_ROOT when set.
std::filesystem::path output_path(const std::filesystem::path& p);

}  // namespace coarseseg::cli
