#pragma once

#include "udaforge/bench.hpp"
#include "udaforge/cmkd.hpp"
#include "udaforge/divergences.hpp"
#include "udaforge/errors.hpp"
#include "udaforge/extensions.hpp"
#include "udaforge/gradcheck.hpp"
#include "udaforge/io.hpp"
#include "udaforge/model.hpp"
#include "udaforge/rng.hpp"
#include "udaforge/rst.hpp"
#include "udaforge/tensor.hpp"
