#include "argen/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "argen/rng.hpp"

namespace argen {

namespace {

double eval_loss(const std::vector<Tensor>& inputs, const GradCheckBuild& build) {
    Graph g;
    std::vector<Ref> refs;
    refs.reserve(inputs.size());
    for (const Tensor& t : inputs) refs.push_back(g.input(t, false));
    Ref loss = build(g, refs);
    ARGEN_CHECK(loss.val().numel() == 1, ShapeError, "grad_check: loss must be scalar");
    return double(loss.val()[0]);
}

// Fourth-order central difference: the larger step keeps float32 forward
// noise small relative to 2h while the h^2 truncation term cancels.
double fd_coord(std::vector<Tensor>& probe, size_t i, int64_t j, float orig, double h,
                const GradCheckBuild& build) {
    auto f = [&](double off) {
        probe[i][j] = float(double(orig) + off);
        return eval_loss(probe, build);
    };
    double d = (8.0 * (f(h) - f(-h)) - (f(2.0 * h) - f(-2.0 * h))) / (12.0 * h);
    probe[i][j] = orig;
    return d;
}

}  // namespace

GradCheckReport grad_check(const std::vector<Tensor>& inputs, const GradCheckBuild& build,
                           uint64_t seed, double h, int coords_per_input) {
    GradCheckReport rep;
    Rng rng(mix_u64(seed, 0x67726164ull));

    // Analytic gradients from one taped run.
    Graph g;
    std::vector<Ref> refs;
    for (const Tensor& t : inputs) refs.push_back(g.input(t, true));
    Ref loss = build(g, refs);
    ARGEN_CHECK(loss.val().numel() == 1, ShapeError, "grad_check: loss must be scalar");
    g.backward(loss);
    std::vector<Tensor> analytic;
    for (Ref r : refs) analytic.push_back(g.grad(r));

    // Random-direction derivative: one probe across all inputs at once.
    {
        std::vector<Tensor> dirs;
        double ana_dir = 0.0;
        int64_t total = 0;
        for (const Tensor& t : inputs) total += t.numel();
        double unit = 1.0 / std::sqrt(double(total));
        for (size_t i = 0; i < inputs.size(); ++i) {
            Tensor d(inputs[i].shape());
            for (int64_t j = 0; j < d.numel(); ++j) {
                d[j] = (rng.uniform() < 0.5 ? -1.0f : 1.0f) * float(unit);
                ana_dir += double(analytic[i][j]) * d[j];
            }
            dirs.push_back(std::move(d));
        }
        auto f = [&](double step) {
            std::vector<Tensor> probe = inputs;
            for (size_t i = 0; i < inputs.size(); ++i)
                for (int64_t j = 0; j < inputs[i].numel(); ++j)
                    probe[i][j] += float(step) * dirs[i][j];
            return eval_loss(probe, build);
        };
        double num_dir = (8.0 * (f(h) - f(-h)) - (f(2.0 * h) - f(-2.0 * h))) / (12.0 * h);
        double denom = std::max({std::abs(ana_dir), std::abs(num_dir), 0.05});
        rep.dir_rel_err = std::abs(ana_dir - num_dir) / denom;
    }

    // Sampled per-coordinate checks.
    for (size_t i = 0; i < inputs.size(); ++i) {
        int64_t n = inputs[i].numel();
        int count = int(std::min<int64_t>(n, coords_per_input));
        for (int c = 0; c < count; ++c) {
            int64_t j = (n == count) ? c : int64_t(rng.next_u64() % uint64_t(n));
            std::vector<Tensor> probe = inputs;
            double num = fd_coord(probe, i, j, probe[i][j], h, build);
            double ana = double(analytic[i][j]);
            double denom = std::max({std::abs(ana), std::abs(num), 0.05});
            double rel = std::abs(ana - num) / denom;
            if (rel > rep.max_coord_rel_err) {
                rep.max_coord_rel_err = rel;
                rep.worst_analytic = ana;
                rep.worst_numeric = num;
            }
            ++rep.coords_checked;
        }
    }
    return rep;
}

}  // namespace argen
