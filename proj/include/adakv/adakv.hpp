// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "adakv/attention.hpp"
#include "adakv/budget.hpp"
#include "adakv/eviction_loss.hpp"
#include "adakv/flat_cache.hpp"
#include "adakv/matrix.hpp"
#include "adakv/policies.hpp"
#include "adakv/report.hpp"
#include "adakv/rng.hpp"
#include "adakv/serde.hpp"
#include "adakv/trace.hpp"
#include "adakv/verify.hpp"
