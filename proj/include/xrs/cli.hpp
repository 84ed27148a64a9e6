#pragma once

#include <ostream>

namespace xrs {

// Subcommands: attribute, shape, train, bo-run, verify, report. Returns the
// process exit status: 0 on success, 2 on usage errors, 1 on runtime errors.
// Failures print one `error: <kind>: <message>` line to `err`.
int cli_dispatch(int argc, const char* const* argv, std::ostream& out,
                 std::ostream& err);
int cli_dispatch(int argc, const char* const* argv);

}  // namespace xrs
