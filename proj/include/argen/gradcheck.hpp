#pragma once

#include <functional>
#include <string>
#include <vector>

#include "argen/graph.hpp"

namespace argen {

// Builds the computation under test on the given graph; `inputs[i]` is the
// ref corresponding to the i-th checked tensor. Must return a scalar.
using GradCheckBuild = std::function<Ref(Graph&, const std::vector<Ref>&)>;

struct GradCheckReport {
    double max_coord_rel_err = 0.0;  // worst sampled per-coordinate error
    double dir_rel_err = 0.0;        // random-direction derivative error
    int coords_checked = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;

    double max_err() const { return std::max(max_coord_rel_err, dir_rel_err); }
};

// Central finite differences against tape gradients. Inputs should be O(1)
// in magnitude; h and the denominator floor are tuned for float32 forward
// evaluation noise.
GradCheckReport grad_check(const std::vector<Tensor>& inputs, const GradCheckBuild& build,
                           uint64_t seed, double h = 1e-1, int coords_per_input = 24);

}  // namespace argen
