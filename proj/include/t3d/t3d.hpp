// Copyright (c) 2026 The t3d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "t3d/ablation.hpp"
#include "t3d/alignment.hpp"
#include "t3d/checkpoint.hpp"
#include "t3d/config.hpp"
#include "t3d/corpus.hpp"
#include "t3d/encoders.hpp"
#include "t3d/evaluation.hpp"
#include "t3d/model.hpp"
#include "t3d/optim.hpp"
#include "t3d/phantom.hpp"
#include "t3d/tokenizer.hpp"
#include "t3d/training.hpp"
#include "t3d/volume.hpp"
