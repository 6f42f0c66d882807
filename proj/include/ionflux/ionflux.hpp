#pragma once

#include "ionflux/calibrate.hpp"
#include "ionflux/chem.hpp"
#include "ionflux/constants.hpp"
#include "ionflux/dataset.hpp"
#include "ionflux/dopri.hpp"
#include "ionflux/enp.hpp"
#include "ionflux/errors.hpp"
#include "ionflux/io.hpp"
#include "ionflux/mlp.hpp"
#include "ionflux/node.hpp"
#include "ionflux/parallel.hpp"
#include "ionflux/sobol.hpp"
#include "ionflux/thermo.hpp"
#include "ionflux/train.hpp"
