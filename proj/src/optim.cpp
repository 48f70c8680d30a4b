#include "argen/optim.hpp"

#include <cmath>

namespace argen {

double global_grad_norm(const ParamStore& ps) {
    double s = 0.0;
    for (const auto& p : ps.all()) {
        if (!p->trainable) continue;
        const Tensor& g = p->grad;
        for (int64_t i = 0; i < g.numel(); ++i) s += double(g[i]) * g[i];
    }
    return std::sqrt(s);
}

double Adam::step(ParamStore& ps, double lr, double clip_norm) {
    return step(std::vector<ParamStore*>{&ps}, lr, clip_norm);
}

double Adam::step(const std::vector<ParamStore*>& group, double lr, double clip_norm) {
    double sq = 0.0;
    for (ParamStore* ps : group) {
        double n = global_grad_norm(*ps);
        sq += n * n;
    }
    double norm = std::sqrt(sq);
    double gscale = 1.0;
    if (clip_norm > 0.0 && norm > clip_norm) gscale = clip_norm / norm;

    ++t_;
    double bc1 = 1.0 - std::pow(b1_, double(t_));
    double bc2 = 1.0 - std::pow(b2_, double(t_));

    for (ParamStore* ps : group) {
        for (const auto& p : ps->all()) {
            if (!p->trainable) continue;
            auto it = slots_.find(p->name);
            if (it == slots_.end()) {
                AdamState st;
                st.m = Tensor::zeros(p->value.shape());
                st.v = Tensor::zeros(p->value.shape());
                it = slots_.emplace(p->name, std::move(st)).first;
            }
            Tensor& m = it->second.m;
            Tensor& v = it->second.v;
            float* w = p->value.data();
            const float* g = p->grad.data();
            for (int64_t i = 0; i < p->value.numel(); ++i) {
                double gi = double(g[i]) * gscale;
                double mi = b1_ * m[i] + (1.0 - b1_) * gi;
                double vi = b2_ * v[i] + (1.0 - b2_) * gi * gi;
                m[i] = float(mi);
                v[i] = float(vi);
                double mhat = mi / bc1;
                double vhat = vi / bc2;
                w[i] = float(w[i] - lr * mhat / (std::sqrt(vhat) + eps_));
            }
        }
        ps->zero_grad();  // gradients are consumed by the step
        ps->bump_version();
    }
    return norm;
}

double lr_schedule(int64_t step, int64_t total, double base, double warmup_frac) {
    int64_t warm = int64_t(std::ceil(double(total) * warmup_frac));
    if (warm > 0 && step < warm) return base * double(step + 1) / double(warm);
    return base;
}

}  // namespace argen
