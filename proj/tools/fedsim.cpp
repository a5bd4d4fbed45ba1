#include "fedsim/harness.hpp"

int main(int argc, char** argv) { return fedsim::cli(argc, argv); }
