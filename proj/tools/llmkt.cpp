#include "llmkt/cli.hpp"

int main(int argc, char** argv) { return llmkt::cli::main(argc, argv); }
