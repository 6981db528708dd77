#pragma once

#include "noisesearch/errors.hpp"
#include "noisesearch/external_verifier.hpp"
#include "noisesearch/harness.hpp"
#include "noisesearch/noise.hpp"
#include "noisesearch/pipeline.hpp"
#include "noisesearch/rng.hpp"
#include "noisesearch/search.hpp"
#include "noisesearch/singular_space.hpp"
#include "noisesearch/svd.hpp"
#include "noisesearch/toy_flow.hpp"
#include "noisesearch/trace_io.hpp"
#include "noisesearch/verifiers.hpp"
