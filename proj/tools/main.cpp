#include "cli.hpp"

int main(int argc, char** argv) { return ionflux::cli::run(argc, argv); }
