#include "unipool/cli.hpp"

int main(int argc, char** argv) { return unipool::run_cli(argc, argv); }
