#include "rged/cli.hpp"

int main(int argc, char** argv) { return rged::run_cli(argc, argv); }
