#include "ipr/cli.hpp"

int main(int argc, char** argv) { return ipr::run_cli(argc, argv); }
