#pragma once

#include "downscale/config.hpp"
#include "downscale/evaluation.hpp"
#include "downscale/fields.hpp"
#include "downscale/gradcheck.hpp"
#include "downscale/io.hpp"
#include "downscale/models.hpp"
#include "downscale/rng.hpp"
#include "downscale/tensor.hpp"
#include "downscale/training.hpp"
