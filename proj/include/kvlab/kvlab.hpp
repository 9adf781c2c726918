#pragma once

// Umbrella header for the judge-side KV-cache reuse laboratory.

#include "kvlab/anchors.hpp"
#include "kvlab/assemble.hpp"
#include "kvlab/cache.hpp"
#include "kvlab/config.hpp"
#include "kvlab/dataset.hpp"
#include "kvlab/errors.hpp"
#include "kvlab/gating.hpp"
#include "kvlab/harness.hpp"
#include "kvlab/layout.hpp"
#include "kvlab/logs.hpp"
#include "kvlab/mask.hpp"
#include "kvlab/metrics.hpp"
#include "kvlab/model.hpp"
#include "kvlab/pipeline.hpp"
#include "kvlab/rng.hpp"
#include "kvlab/rope.hpp"
#include "kvlab/strategies.hpp"
#include "kvlab/templates.hpp"
#include "kvlab/textio.hpp"
#include "kvlab/version.hpp"
#include "kvlab/vocab.hpp"
#include "kvlab/weights.hpp"
