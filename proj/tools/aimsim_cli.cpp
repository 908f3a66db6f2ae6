#include "aimsim/cli.hpp"

int main(int argc, char** argv) { return aimsim::cli::run(argc, argv); }
