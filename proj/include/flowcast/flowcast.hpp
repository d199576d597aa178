#pragma once

#include "flowcast/checkpoint.hpp"
#include "flowcast/conditioner.hpp"
#include "flowcast/config.hpp"
#include "flowcast/data.hpp"
#include "flowcast/errors.hpp"
#include "flowcast/flow.hpp"
#include "flowcast/layers.hpp"
#include "flowcast/masks.hpp"
#include "flowcast/metrics.hpp"
#include "flowcast/normal.hpp"
#include "flowcast/rng.hpp"
#include "flowcast/tape.hpp"
#include "flowcast/tensor.hpp"
#include "flowcast/train.hpp"
