// Copyright 2026 The specpv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "specpv/numerics.hpp"
#include "specpv/io.hpp"
#include "specpv/model.hpp"
#include "specpv/kvstore.hpp"
#include "specpv/drafter.hpp"
#include "specpv/engine.hpp"
#include "specpv/metrics.hpp"
#include "specpv/corpus.hpp"
