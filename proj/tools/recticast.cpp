#include "recticast/cli.hpp"

int main(int argc, char** argv) { return recticast::cli::run(argc, argv); }
