#pragma once

#include "cfair/adam.hpp"
#include "cfair/checkpoint.hpp"
#include "cfair/corpus.hpp"
#include "cfair/csv.hpp"
#include "cfair/distillation.hpp"
#include "cfair/errors.hpp"
#include "cfair/faireval.hpp"
#include "cfair/inference.hpp"
#include "cfair/kernels.hpp"
#include "cfair/losses.hpp"
#include "cfair/model.hpp"
#include "cfair/parallel.hpp"
#include "cfair/pruning.hpp"
#include "cfair/records.hpp"
#include "cfair/report.hpp"
#include "cfair/rng.hpp"
#include "cfair/scorer.hpp"
#include "cfair/stats.hpp"
#include "cfair/sweep.hpp"
#include "cfair/synthetic.hpp"
#include "cfair/tape.hpp"
#include "cfair/tensor.hpp"
#include "cfair/tokenizer.hpp"
#include "cfair/tolerances.hpp"
#include "cfair/training.hpp"
