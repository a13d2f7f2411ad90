#ifndef SFANET_CLI_HPP
#define SFANET_CLI_HPP

namespace sfanet {

// Entry point for the sfanet binary (subcommands: gen-data, train, eval,
// infer, bench, gradcheck). Exit codes: 0 success, 1 usage error, 2
// check/verification failure.
int run_cli(int argc, const char* const* argv);

}  // namespace sfanet

#endif
