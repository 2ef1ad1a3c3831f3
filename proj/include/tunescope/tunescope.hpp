#pragma once

#include "tunescope/data.hpp"
#include "tunescope/divergence.hpp"
#include "tunescope/error.hpp"
#include "tunescope/evaluation.hpp"
#include "tunescope/explainer.hpp"
#include "tunescope/image.hpp"
#include "tunescope/predictor.hpp"
#include "tunescope/predictors.hpp"
#include "tunescope/protocol.hpp"
#include "tunescope/rng.hpp"
#include "tunescope/sampling.hpp"
#include "tunescope/segmentation.hpp"
#include "tunescope/tensors.hpp"
