#pragma once

#include "types.hpp"
#include "rng.hpp"
#include "families.hpp"
#include "shift.hpp"
#include "aggregates.hpp"
#include "el.hpp"
#include "estimators.hpp"
#include "simulation.hpp"
#include "io.hpp"
