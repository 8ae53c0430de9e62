#pragma once

#include "advi.hpp"
#include "autodiff.hpp"
#include "diagnostics.hpp"
#include "distributions.hpp"
#include "errors.hpp"
#include "estimator.hpp"
#include "gaussian_process.hpp"
#include "linear_regression.hpp"
#include "model.hpp"
#include "nuts.hpp"
#include "persistence.hpp"
#include "random.hpp"
#include "trace.hpp"
