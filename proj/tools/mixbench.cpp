#include "mixnorm/bench.hpp"

int main(int argc, char** argv) { return mixnorm::cli_main(argc, argv); }
