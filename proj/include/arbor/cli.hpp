#pragma once

namespace arbor {

// Entry point of the command-line tool. Exit codes: 0 success, 2 usage
// error, 3 data error, 4 numerical failure.
int run(int argc, const char* const* argv);

}  // namespace arbor
