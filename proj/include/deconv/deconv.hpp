#pragma once

#include "anls.hpp"
#include "error.hpp"
#include "eval.hpp"
#include "filter.hpp"
#include "grid_search.hpp"
#include "loss.hpp"
#include "marker.hpp"
#include "model.hpp"
#include "parallel.hpp"
#include "pipeline.hpp"
#include "qp.hpp"
#include "random.hpp"
#include "solver.hpp"
#include "stats.hpp"
#include "synth.hpp"
#include "tsv.hpp"
