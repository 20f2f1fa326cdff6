#pragma once

#include <iosfwd>

namespace graftkd {

// Fast property suite behind the `verify` CLI subcommand: fold exactness,
// finalization equivalence, identity-graft transparency, loss properties,
// freezing, hyperparameter rules and the sampler contract, each printed as
// one pass/fail line. Returns true when everything holds.
bool run_property_suites(std::ostream& out);

}  // namespace graftkd
