// SPDX-License-Identifier: Apache-2.0
#pragma once

// Umbrella header.

#include "milora/autograd.hpp"
#include "milora/checkpoint.hpp"
#include "milora/config_json.hpp"
#include "milora/experts.hpp"
#include "milora/io_util.hpp"
#include "milora/layers.hpp"
#include "milora/metrics.hpp"
#include "milora/model.hpp"
#include "milora/optim.hpp"
#include "milora/synthdata.hpp"
#include "milora/tensor.hpp"
#include "milora/train.hpp"
