#pragma once

namespace mixnorm {

// The mixbench entry point, factored out of main() so tests can drive it.
// Exit codes: 0 success, 1 configuration/usage error, 2 runtime failure.
int cli_main(int argc, char** argv);

}  // namespace mixnorm
