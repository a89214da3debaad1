// Copyright (c) 2026 cotformer.cpp contributors
// SPDX-License-Identifier: Apache-2.0

#include "cotformer/cli/cli.hpp"

int main(int argc, char** argv) { return cotformer::run_cli(argc, argv); }
