#pragma once

#include "hidetell/autodiff.hpp"
#include "hidetell/checkpoint.hpp"
#include "hidetell/config.hpp"
#include "hidetell/data_io.hpp"
#include "hidetell/error.hpp"
#include "hidetell/generation.hpp"
#include "hidetell/grad_check.hpp"
#include "hidetell/grad_suite.hpp"
#include "hidetell/layers.hpp"
#include "hidetell/metrics.hpp"
#include "hidetell/model.hpp"
#include "hidetell/tensor.hpp"
#include "hidetell/training.hpp"
