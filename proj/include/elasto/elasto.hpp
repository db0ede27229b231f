// Umbrella header.
#pragma once

#include "elasto/autodiff.hpp"
#include "elasto/common.hpp"
#include "elasto/fieldops.hpp"
#include "elasto/harness.hpp"
#include "elasto/losses.hpp"
#include "elasto/metrics.hpp"
#include "elasto/multistage.hpp"
#include "elasto/network.hpp"
#include "elasto/phantom.hpp"
#include "elasto/rfdata.hpp"
#include "elasto/tensor.hpp"
