// Copyright (C) 2026 The Open-Edit Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include "openedit/common.hpp"
#include "openedit/log.hpp"

int main(int argc, char** argv) {
    openedit::configure_torch_runtime();
    openedit::log::set_threshold(openedit::log::Level::warn);
    doctest::Context context(argc, argv);
    return context.run();
}
