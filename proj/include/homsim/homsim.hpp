#pragma once

// Everything in one include.

#include "homsim/units.hpp"
#include "homsim/core_model.hpp"
#include "homsim/correlation_model.hpp"
#include "homsim/corrections.hpp"
#include "homsim/dephasing.hpp"
#include "homsim/spin_dynamics.hpp"
#include "homsim/monte_carlo.hpp"
#include "homsim/fitting.hpp"
#include "homsim/io.hpp"
