#pragma once

// Umbrella header.

#include "dman/attention.hpp"
#include "dman/autodiff.hpp"
#include "dman/checkpoint.hpp"
#include "dman/data.hpp"
#include "dman/errors.hpp"
#include "dman/eval.hpp"
#include "dman/grad_check.hpp"
#include "dman/matrix.hpp"
#include "dman/memory.hpp"
#include "dman/model.hpp"
#include "dman/rng.hpp"
#include "dman/run_config.hpp"
#include "dman/train.hpp"
