#include "ltp/cli.hpp"

int main(int argc, char** argv) { return ltp::cli::run(argc, argv); }
