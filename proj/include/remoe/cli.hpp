#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace remoe {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitProperty = 3;

inline constexpr const char* kToolVersion = "0.1.0";

/// remoe_lab entry point: synth, validate, metrics, simulate, bound-check,
/// router, train, gradcheck, sweep.
int dispatch(int argc, char** argv);

/// Same, with `args` excluding the program name and explicit streams.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace remoe
