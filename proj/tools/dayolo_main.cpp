#include "dayolo/cli.hpp"

int main(int argc, char** argv) { return dayolo::dispatch(argc, argv); }
