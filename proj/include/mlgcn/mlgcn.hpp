#pragma once

#include "mlgcn/common.hpp"
#include "mlgcn/textcore.hpp"
#include "mlgcn/graphstore.hpp"
#include "mlgcn/model.hpp"
#include "mlgcn/sampling.hpp"
#include "mlgcn/train.hpp"
#include "mlgcn/serve.hpp"
#include "mlgcn/eval.hpp"
#include "mlgcn/synthgen.hpp"
