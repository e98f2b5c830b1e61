#include "astra/cli.hpp"

int main(int argc, char** argv) { return astra::run_cli(argc, argv); }
