#pragma once

// Umbrella header.

#include "biloop/error.hpp"
#include "biloop/rng.hpp"
#include "biloop/geometry.hpp"
#include "biloop/io_util.hpp"
#include "biloop/trajectory_io.hpp"
#include "biloop/descriptors.hpp"
#include "biloop/synthworld.hpp"
#include "biloop/backend.hpp"
#include "biloop/dataset.hpp"
#include "biloop/vlad.hpp"
#include "biloop/tensor_io.hpp"
#include "biloop/optim.hpp"
#include "biloop/embedding.hpp"
#include "biloop/dataprep.hpp"
#include "biloop/train_embedding.hpp"
#include "biloop/posereg.hpp"
#include "biloop/localization.hpp"
#include "biloop/evaluation.hpp"
#include "biloop/sweep.hpp"
#include "biloop/config.hpp"
#include "biloop/pipeline.hpp"
