#pragma once

namespace ph {

// phgrid entry point. Exit codes: 0 success, 1 domain error, 2 usage error.
int run_cli(int argc, char** argv);

}  // namespace ph
