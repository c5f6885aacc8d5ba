#include "cli/cli.hpp"

int main(int argc, char** argv) { return quanos::cli::dispatch(argc, argv); }
