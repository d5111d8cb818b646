#pragma once

#include "efr/adam.hpp"
#include "efr/adaptation.hpp"
#include "efr/align_losses.hpp"
#include "efr/checkpoint.hpp"
#include "efr/config.hpp"
#include "efr/error.hpp"
#include "efr/gradcheck.hpp"
#include "efr/lie_rotation.hpp"
#include "efr/metrics.hpp"
#include "efr/nets.hpp"
#include "efr/ot_solver.hpp"
#include "efr/presets.hpp"
#include "efr/rng.hpp"
