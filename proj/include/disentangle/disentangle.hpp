#pragma once

#include "disentangle/adam.hpp"
#include "disentangle/config.hpp"
#include "disentangle/data.hpp"
#include "disentangle/diagnostics.hpp"
#include "disentangle/eval.hpp"
#include "disentangle/gradcheck.hpp"
#include "disentangle/io.hpp"
#include "disentangle/layers.hpp"
#include "disentangle/model.hpp"
#include "disentangle/ops.hpp"
#include "disentangle/params.hpp"
#include "disentangle/tape.hpp"
#include "disentangle/tensor.hpp"
#include "disentangle/training.hpp"
