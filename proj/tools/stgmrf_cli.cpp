#include "stgmrf/app.hpp"

int main(int argc, char** argv) { return stgmrf::run_cli(argc, argv); }
