#pragma once

#include "seqtwin/augment.hpp"
#include "seqtwin/dataset.hpp"
#include "seqtwin/loss.hpp"
#include "seqtwin/model.hpp"
#include "seqtwin/rng.hpp"
#include "seqtwin/synth.hpp"
#include "seqtwin/tensor.hpp"
#include "seqtwin/train.hpp"
