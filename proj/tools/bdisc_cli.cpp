#include <bdisc/cli.hpp>

int main(int argc, char** argv) { return bdisc::run_cli(argc, argv); }
