#include "matchrec/cli.hpp"

int main(int argc, char** argv) { return matchrec::cli::run(argc, argv); }
