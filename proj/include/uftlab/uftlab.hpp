// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "uftlab/autograd.hpp"
#include "uftlab/checkpoint.hpp"
#include "uftlab/config.hpp"
#include "uftlab/datasets.hpp"
#include "uftlab/error.hpp"
#include "uftlab/evalsuite.hpp"
#include "uftlab/grad_check.hpp"
#include "uftlab/gradcheck_suite.hpp"
#include "uftlab/model.hpp"
#include "uftlab/objectives.hpp"
#include "uftlab/pipeline.hpp"
#include "uftlab/rng.hpp"
#include "uftlab/tensor.hpp"
#include "uftlab/tokenizer.hpp"
#include "uftlab/trainer.hpp"
