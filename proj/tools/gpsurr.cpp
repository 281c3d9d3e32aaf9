#include "gpsurr/cli.hpp"

int main(int argc, char **argv) { return gpsurr::cli::main(argc, argv); }
