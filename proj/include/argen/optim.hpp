#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "argen/graph.hpp"

namespace argen {

struct AdamState {
    Tensor m, v;
};

class Adam {
public:
    Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : b1_(beta1), b2_(beta2), eps_(eps) {}

    // One update over all trainable parameters; consumes (zeroes) all grads.
    // clip_norm <= 0 disables global-norm clipping. Returns the pre-clip
    // global gradient norm. The group overload treats several stores as one
    // model: a single shared step counter and one global clip norm.
    double step(ParamStore& ps, double lr, double clip_norm);
    double step(const std::vector<ParamStore*>& group, double lr, double clip_norm);

    int64_t t() const { return t_; }
    void set_t(int64_t t) { t_ = t; }
    std::map<std::string, AdamState>& slots() { return slots_; }

private:
    double b1_, b2_, eps_;
    int64_t t_ = 0;
    std::map<std::string, AdamState> slots_;
};

double global_grad_norm(const ParamStore& ps);

// Linear warm-up over the first `warmup_frac` of `total` steps, then constant.
double lr_schedule(int64_t step, int64_t total, double base, double warmup_frac);

}  // namespace argen
