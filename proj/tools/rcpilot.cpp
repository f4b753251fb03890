#include "rcpilot/cli.hpp"

int main(int argc, char** argv) { return rcpilot::cli::run(argc, argv); }
