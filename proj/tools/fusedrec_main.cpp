#include "fusedrec/cli.hpp"

int main(int argc, char** argv) { return fusedrec::run_cli(argc, argv); }
