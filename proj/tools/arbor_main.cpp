#include "arbor/cli.hpp"

int main(int argc, char** argv) { return arbor::run(argc, argv); }
