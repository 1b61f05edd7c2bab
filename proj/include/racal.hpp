#pragma once

// Umbrella header for the radar-guided metric depth library.

#include "racal/geometry.hpp"
#include "racal/labelgen.hpp"
#include "racal/refiner.hpp"
#include "racal/align.hpp"
#include "racal/metrics.hpp"
#include "racal/synth.hpp"
#include "racal/io.hpp"
