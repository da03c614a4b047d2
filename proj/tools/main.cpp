#include "refsum/cli.hpp"

int main(int argc, char** argv) { return refsum::cli::run(argc, argv); }
