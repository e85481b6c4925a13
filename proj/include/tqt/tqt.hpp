// Copyright 2026 The TQT Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "tqt/calib/calibration.hpp"
#include "tqt/core/error.hpp"
#include "tqt/core/kernels.hpp"
#include "tqt/core/rng.hpp"
#include "tqt/core/tape.hpp"
#include "tqt/core/tensor.hpp"
#include "tqt/core/tensor_io.hpp"
#include "tqt/fxp/fixed_point.hpp"
#include "tqt/fxp/lowering.hpp"
#include "tqt/harness/desk.hpp"
#include "tqt/harness/toy.hpp"
#include "tqt/ir/calibrate.hpp"
#include "tqt/ir/executor.hpp"
#include "tqt/ir/graph.hpp"
#include "tqt/ir/passes.hpp"
#include "tqt/ir/quantize_pass.hpp"
#include "tqt/ir/text_format.hpp"
#include "tqt/optim/optim.hpp"
#include "tqt/quant/quantizer.hpp"
#include "tqt/quant/quantizer_op.hpp"
