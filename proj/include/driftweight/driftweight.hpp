#pragma once

// Umbrella header for the driftweight library.

#include "driftweight/errors.hpp"
#include "driftweight/rng.hpp"
#include "driftweight/matrix.hpp"
#include "driftweight/nn.hpp"
#include "driftweight/scorer.hpp"
#include "driftweight/timescale.hpp"
#include "driftweight/data.hpp"
#include "driftweight/bilevel.hpp"
#include "driftweight/harness.hpp"
#include "driftweight/stream.hpp"
