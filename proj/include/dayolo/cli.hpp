#pragma once

namespace dayolo {

// Entry point for the `dayolo` binary. Exit codes: 0 success, 1 validation
// error (including usage errors), 2 IO error, 3 divergence abort.
int dispatch(int argc, const char* const* argv);

}  // namespace dayolo
