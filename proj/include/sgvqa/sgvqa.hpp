#pragma once

#include "sgvqa/cli.hpp"
#include "sgvqa/config.hpp"
#include "sgvqa/corpus.hpp"
#include "sgvqa/gradcheck.hpp"
#include "sgvqa/graph.hpp"
#include "sgvqa/losses.hpp"
#include "sgvqa/model.hpp"
#include "sgvqa/optim.hpp"
#include "sgvqa/pipeline.hpp"
#include "sgvqa/qa.hpp"
#include "sgvqa/rng.hpp"
#include "sgvqa/scene.hpp"
#include "sgvqa/tensor.hpp"
#include "sgvqa/trainer.hpp"
#include "sgvqa/verify.hpp"
