#pragma once

// Umbrella header.

#include "ringformer/accounting.hpp"
#include "ringformer/analysis.hpp"
#include "ringformer/checkpoint.hpp"
#include "ringformer/container.hpp"
#include "ringformer/autograd.hpp"
#include "ringformer/blocks.hpp"
#include "ringformer/config.hpp"
#include "ringformer/errors.hpp"
#include "ringformer/functional.hpp"
#include "ringformer/gradcheck.hpp"
#include "ringformer/level_signal.hpp"
#include "ringformer/metrics.hpp"
#include "ringformer/model.hpp"
#include "ringformer/optim.hpp"
#include "ringformer/params.hpp"
#include "ringformer/rng.hpp"
#include "ringformer/run_config.hpp"
#include "ringformer/tasks.hpp"
#include "ringformer/tensor.hpp"
#include "ringformer/train.hpp"
