#pragma once

// Umbrella header: the whole library in one include.

#include "tinydd/augment.hpp"
#include "tinydd/autodiff.hpp"
#include "tinydd/data.hpp"
#include "tinydd/distill.hpp"
#include "tinydd/eval.hpp"
#include "tinydd/matchers.hpp"
#include "tinydd/models.hpp"
#include "tinydd/ops.hpp"
#include "tinydd/rng.hpp"
#include "tinydd/serialize.hpp"
#include "tinydd/supervision.hpp"
#include "tinydd/tensor.hpp"
