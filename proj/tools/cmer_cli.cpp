// SPDX-License-Identifier: Apache-2.0
#include <iostream>

#include "cmer/cli.h"

int main(int argc, char** argv) { return cmer::cli_main(argc, argv, std::cout, std::cerr); }
