#include "hpinit/cli.hpp"

int main(int argc, char** argv) { return hpinit::cli::run(argc, argv); }
