#pragma once

#include "rcpilot/nn/layers.hpp"
#include "rcpilot/nn/lstm.hpp"
#include "rcpilot/nn/models.hpp"
#include "rcpilot/nn/optim.hpp"
#include "rcpilot/nn/saliency.hpp"
#include "rcpilot/nn/serialize.hpp"
#include "rcpilot/nn/tensor.hpp"
#include "rcpilot/nn/train.hpp"
