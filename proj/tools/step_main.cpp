#include "step/cli.hpp"

int main(int argc, char** argv) { return step::dispatch(argc, argv); }
