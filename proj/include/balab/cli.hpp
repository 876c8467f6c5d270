#pragma once

#include <string>
#include <vector>

namespace balab {

// Exit codes shared by every subcommand.
enum ExitCode {
    kExitOk = 0,
    kExitFailure = 1,      // partial sweep failure or unexpected error
    kExitConfig = 2,       // invalid config/grid/input, run-name collision, missing files
    kExitDiverged = 3,     // training produced a non-finite loss
    kExitGradcheck = 4,    // a gradient-check component exceeded the threshold
    kExitFingerprint = 5,  // checkpoint does not match the configured model
};

// args exclude the program name, e.g. {"train", "--config", "lab.cfg"}
int run_cli(const std::vector<std::string>& args);

}  // namespace balab
