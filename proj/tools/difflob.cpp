#include "difflob/cli.hpp"

int main(int argc, char** argv) { return difflob::cli::run(argc, argv); }
