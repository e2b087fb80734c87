#pragma once

#include "tprop/errors.hpp"
#include "tprop/rng.hpp"
#include "tprop/linalg.hpp"
#include "tprop/layers.hpp"
#include "tprop/tpengine.hpp"
#include "tprop/optim.hpp"
#include "tprop/baselines.hpp"
#include "tprop/models.hpp"
#include "tprop/data.hpp"
#include "tprop/checkpoint.hpp"
#include "tprop/verify.hpp"
#include "tprop/experiment.hpp"
