// SPDX-License-Identifier: Apache-2.0
#include "cpolab/cli.hpp"

int main(int argc, char** argv) {
    return cpolab::cli::run(argc, argv);
}
