#pragma once

// Command-line entry point, split from main() so tests can drive it too.
// Exit codes: 0 success, 2 usage/config error, 3 numerical abort, 4 I/O error.

namespace unipool {

int run_cli(int argc, const char* const* argv);

}  // namespace unipool
