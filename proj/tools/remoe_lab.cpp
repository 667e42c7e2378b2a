#include "remoe/cli.hpp"

int main(int argc, char** argv) { return remoe::dispatch(argc, argv); }
