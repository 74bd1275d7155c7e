// Copyright (c) 2026 The t3d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "t3d/fusion.hpp"
#include "t3d/losses.hpp"
#include "t3d/objective.hpp"
