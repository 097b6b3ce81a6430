#include "cli.hpp"

int main(int argc, char** argv) { return mtpd::cli::run_cli(argc, argv); }
