#include "sdfvf/cli.hpp"

int main(int argc, char** argv) { return sdfvf::cli::run(argc, argv); }
