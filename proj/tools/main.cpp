#include "sfanet/cli.hpp"

int main(int argc, char** argv) { return sfanet::run_cli(argc, argv); }
