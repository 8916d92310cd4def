#include "mp3sleep/cli.hpp"

int main(int argc, char** argv) { return mp3sleep::cli::run(argc, argv); }
