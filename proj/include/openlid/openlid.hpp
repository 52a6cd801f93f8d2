// Copyright 2026 The OpenLID Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "openlid/error.hpp"
#include "openlid/util.hpp"
#include "openlid/corpus.hpp"
#include "openlid/features.hpp"
#include "openlid/lda.hpp"
#include "openlid/neural.hpp"
#include "openlid/models.hpp"
#include "openlid/openset.hpp"
#include "openlid/cli.hpp"
