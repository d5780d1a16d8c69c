#pragma once

#include "esnfb/analysis.hpp"
#include "esnfb/diagnostics.hpp"
#include "esnfb/errors.hpp"
#include "esnfb/feedback.hpp"
#include "esnfb/random.hpp"
#include "esnfb/readout.hpp"
#include "esnfb/reservoir.hpp"
#include "esnfb/runner.hpp"
#include "esnfb/sampler.hpp"
#include "esnfb/tasks.hpp"
