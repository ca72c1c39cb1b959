#pragma once

#include "noisegate/error.hpp"
#include "noisegate/matrix.hpp"
#include "noisegate/corpus.hpp"
#include "noisegate/tokenizer.hpp"
#include "noisegate/model.hpp"
#include "noisegate/decoding.hpp"
#include "noisegate/metrics.hpp"
#include "noisegate/harness.hpp"
#include "noisegate/config.hpp"
