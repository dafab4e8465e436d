#pragma once

// Converts engine objects into the plain inputs the oracle consumes. Only
// configuration is copied; no engine formulas are involved.

#include "dflow/oracle/oracle.hpp"
#include "dflow/paths.hpp"
#include "dflow/policy.hpp"

namespace dflow {

oracle::PathSpec to_oracle(const ProbabilityPath& path);

// exp of a log-probability table.
oracle::Table to_table(const LogProbs& logp);

oracle::PosteriorFn to_posterior_fn(const PosteriorModel& model, int prompt = 0);

}  // namespace dflow
