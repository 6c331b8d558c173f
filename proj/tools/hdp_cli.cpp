#include "hdp/cli.hpp"

int main(int argc, char** argv) { return hdp::cli::main(argc, argv); }
