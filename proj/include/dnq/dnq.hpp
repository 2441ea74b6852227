#pragma once

#include "ablation.hpp"
#include "checkpoint.hpp"
#include "config.hpp"
#include "datasets.hpp"
#include "errors.hpp"
#include "experiment.hpp"
#include "flatness.hpp"
#include "grad_check.hpp"
#include "graph.hpp"
#include "injection.hpp"
#include "loss.hpp"
#include "models.hpp"
#include "noise_stats.hpp"
#include "optim.hpp"
#include "ptq.hpp"
#include "quantizer.hpp"
#include "rng.hpp"
#include "tensor.hpp"
#include "trainer.hpp"
