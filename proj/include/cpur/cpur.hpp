#pragma once

#include "cpur/aps.hpp"
#include "cpur/conformal.hpp"
#include "cpur/dataset.hpp"
#include "cpur/error.hpp"
#include "cpur/experiment.hpp"
#include "cpur/io.hpp"
#include "cpur/model.hpp"
#include "cpur/numeric.hpp"
#include "cpur/simplex.hpp"
#include "cpur/synthetic.hpp"
#include "cpur/theory.hpp"
#include "cpur/weighting.hpp"
