#pragma once

#include "cpmerge/core.hpp"
#include "cpmerge/hdv_sim.hpp"
#include "cpmerge/network.hpp"
#include "cpmerge/predictor.hpp"
#include "cpmerge/stats.hpp"
#include "cpmerge/conformal.hpp"
#include "cpmerge/planner.hpp"
#include "cpmerge/loop.hpp"
#include "cpmerge/io.hpp"
