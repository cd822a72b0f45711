#ifndef LNL_LNL_HPP
#define LNL_LNL_HPP

#include "lnl/adversarial.hpp"
#include "lnl/config.hpp"
#include "lnl/data.hpp"
#include "lnl/gradcheck.hpp"
#include "lnl/model.hpp"
#include "lnl/moex.hpp"
#include "lnl/nn.hpp"
#include "lnl/ops.hpp"
#include "lnl/rng.hpp"
#include "lnl/serialize.hpp"
#include "lnl/tensor.hpp"
#include "lnl/train.hpp"

#endif
