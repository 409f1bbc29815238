#include "dawn/commands.hpp"

int main(int argc, char** argv) { return dawn::run_cli(argc, argv); }
