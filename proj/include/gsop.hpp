#pragma once

#include "gsop/accounting.hpp"
#include "gsop/backbone.hpp"
#include "gsop/certify.hpp"
#include "gsop/checkpoint.hpp"
#include "gsop/config.hpp"
#include "gsop/covariance.hpp"
#include "gsop/data.hpp"
#include "gsop/gradcheck.hpp"
#include "gsop/gsop_blocks.hpp"
#include "gsop/isqrt.hpp"
#include "gsop/trainer.hpp"
