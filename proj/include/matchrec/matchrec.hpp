#pragma once

#include "matchrec/checkpoint.hpp"
#include "matchrec/corpus.hpp"
#include "matchrec/embeddings.hpp"
#include "matchrec/error.hpp"
#include "matchrec/experiments.hpp"
#include "matchrec/matching.hpp"
#include "matchrec/model.hpp"
#include "matchrec/stats.hpp"
#include "matchrec/training.hpp"
