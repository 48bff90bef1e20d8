#include "coarseseg/cli.hpp"

int main(int argc, char** argv) { return coarseseg::cli::run(argc, argv); }
