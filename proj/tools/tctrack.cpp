#include "tctrack/cli.hpp"

int main(int argc, char** argv) { return tctrack::cli_main(argc, argv); }
