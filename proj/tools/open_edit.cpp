// Copyright (C) 2026 The Open-Edit Authors
// SPDX-License-Identifier: Apache-2.0

#include "openedit/cli.hpp"

int main(int argc, char** argv) { return openedit::cli::run(argc, argv); }
