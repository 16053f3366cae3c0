// Copyright (c) 2026, the grasskit authors.
// SPDX-License-Identifier: Apache-2.0
#include "grasskit/cli.hpp"

int main(int argc, char** argv) { return grasskit::run_cli(argc, argv); }
