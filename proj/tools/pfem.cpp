#include "pfem/cli.hpp"

int main(int argc, char** argv) { return pfem::cli::run(argc, argv); }
