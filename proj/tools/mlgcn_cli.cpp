#include "mlgcn/cli.hpp"

int main(int argc, char** argv) { return mlgcn::cli::run(argc, argv); }
