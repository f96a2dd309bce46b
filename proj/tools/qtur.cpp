#include "qtur/cli.hpp"

int main(int argc, char** argv) { return qtur::cli::main_entry(argc, argv); }
