#pragma once

#include "mspm/data/batching.hpp"
#include "mspm/data/image_io.hpp"
#include "mspm/data/patch_set.hpp"
#include "mspm/data/strip.hpp"
#include "mspm/data/synthetic.hpp"
#include "mspm/errors.hpp"
#include "mspm/eval.hpp"
#include "mspm/grad_check.hpp"
#include "mspm/heatmap.hpp"
#include "mspm/io/checkpoint.hpp"
#include "mspm/io/desc.hpp"
#include "mspm/io/run_config.hpp"
#include "mspm/loss.hpp"
#include "mspm/model/model.hpp"
#include "mspm/optim.hpp"
#include "mspm/random.hpp"
#include "mspm/tensor.hpp"
#include "mspm/train.hpp"
