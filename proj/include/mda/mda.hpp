#pragma once

#include "mda/common.hpp"
#include "mda/io.hpp"
#include "mda/shape.hpp"
#include "mda/embedding.hpp"
#include "mda/mesh.hpp"
#include "mda/fem.hpp"
#include "mda/fpca.hpp"
#include "mda/regression.hpp"
#include "mda/inference.hpp"
#include "mda/simulation.hpp"
#include "mda/config.hpp"
#include "mda/pipeline.hpp"
