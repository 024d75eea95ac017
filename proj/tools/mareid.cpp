#include "mareid/cli.hpp"

int main(int argc, char** argv) { return mareid::cli::run(argc, argv); }
