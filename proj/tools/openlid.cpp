// Copyright 2026 The OpenLID Authors
// SPDX-License-Identifier: Apache-2.0

#include "openlid/cli.hpp"

int main(int argc, char** argv) { return openlid::cli::run(argc, argv); }
