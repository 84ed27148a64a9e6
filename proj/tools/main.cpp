#include "xrs/cli.hpp"

int main(int argc, char** argv) { return xrs::cli_dispatch(argc, argv); }
