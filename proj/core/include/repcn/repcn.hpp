#pragma once

#include "repcn/accounting.hpp"
#include "repcn/autograd.hpp"
#include "repcn/checkpoint.hpp"
#include "repcn/controlnet.hpp"
#include "repcn/data.hpp"
#include "repcn/diffusion.hpp"
#include "repcn/error.hpp"
#include "repcn/gradcheck.hpp"
#include "repcn/kernels.hpp"
#include "repcn/layers.hpp"
#include "repcn/model.hpp"
#include "repcn/pgm.hpp"
#include "repcn/reparam.hpp"
#include "repcn/tensor.hpp"
#include "repcn/train.hpp"
#include "repcn/unet.hpp"
