#pragma once

#include "maskspec/audio.hpp"
#include "maskspec/checkpoint.hpp"
#include "maskspec/common.hpp"
#include "maskspec/config.hpp"
#include "maskspec/dataset.hpp"
#include "maskspec/finetune.hpp"
#include "maskspec/manifest.hpp"
#include "maskspec/metrics.hpp"
#include "maskspec/model.hpp"
#include "maskspec/optim.hpp"
#include "maskspec/patch.hpp"
#include "maskspec/pretrain.hpp"
#include "maskspec/rng.hpp"
#include "maskspec/tensor.hpp"
