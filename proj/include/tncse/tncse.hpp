#pragma once

#include "tncse/autodiff.hpp"
#include "tncse/checkpoint.hpp"
#include "tncse/config.hpp"
#include "tncse/data.hpp"
#include "tncse/distill.hpp"
#include "tncse/encoder.hpp"
#include "tncse/ensemble.hpp"
#include "tncse/errors.hpp"
#include "tncse/evaluation.hpp"
#include "tncse/grad_check.hpp"
#include "tncse/grad_suite.hpp"
#include "tncse/losses.hpp"
#include "tncse/optimizer.hpp"
#include "tncse/pipeline.hpp"
#include "tncse/rng.hpp"
#include "tncse/tensor.hpp"
#include "tncse/training.hpp"
#include "tncse/vector_ops.hpp"
