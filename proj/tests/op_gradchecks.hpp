#pragma once

// Shared list of finite-difference cases covering every differentiable op.
// Used by both the unit tests and the acceptance gate.

#include <memory>
#include <string>
#include <vector>

#include "argen/gradcheck.hpp"
#include "argen/graph.hpp"
#include "argen/rng.hpp"

namespace argen::testing {

struct OpCase {
    std::string name;
    std::vector<Tensor> inputs;
    GradCheckBuild build;
};

inline Ref scalarize(Graph& g, Ref out, uint64_t seed) {
    if (out.val().numel() == 1) return out;
    Rng r(mix_u64(seed, 0x70726f6aull));
    Tensor proj(out.val().shape());
    for (int64_t i = 0; i < proj.numel(); ++i) proj[i] = float(r.normal());
    return g.sum_all(g.mul(out, g.input(proj, false)));
}

inline std::vector<OpCase> make_op_cases(uint64_t seed) {
    Rng rng(seed);
    auto randn = [&](std::vector<int> shape) { return Tensor::randn(std::move(shape), rng); };
    std::vector<OpCase> cases;

    cases.push_back({"add",
                     {randn({4, 6}), randn({4, 6})},
                     [seed](Graph& g, const std::vector<Ref>& in) {
                         return scalarize(g, g.add(in[0], in[1]), seed);
                     }});
    cases.push_back({"sub",
                     {randn({4, 6}), randn({4, 6})},
                     [seed](Graph& g, const std::vector<Ref>& in) {
                         return scalarize(g, g.sub(in[0], in[1]), seed);
                     }});
    cases.push_back({"mul",
                     {randn({4, 6}), randn({4, 6})},
                     [seed](Graph& g, const std::vector<Ref>& in) {
                         return scalarize(g, g.mul(in[0], in[1]), seed);
                     }});
    cases.push_back({"scale",
                     {randn({4, 6})},
                     [seed](Graph& g, const std::vector<Ref>& in) {
                         return scalarize(g, g.scale(in[0], 1.7f), seed);
                     }});
    cases.push_back({"add_bias",
                     {randn({5, 4}), randn({4})},
                     [seed](Graph& g, const std::vector<Ref>& in) {
                         return scalarize(g, g.add_bias(in[0], in[1]), seed);
                     }});
    cases.push_back({"matmul",
                     {randn({4, 5}), randn({5, 3})},
                     [seed](Graph& g, const std::vector<Ref>& in) {
                         return scalarize(g, g.matmul(in[0], in[1]), seed);
                     }});
    cases.push_back({"matmul_nt",
                     {randn({4, 5}), randn({3, 5})},
                     [seed](Graph& g, const std::vector<Ref>& in) {
                         return scalarize(g, g.matmul_nt(in[0], in[1]), seed);
                     }});
    cases.push_back({"silu",
                     {randn({4, 6})},
                     [seed](Graph& g, const std::vector<Ref>& in) {
                         return scalarize(g, g.silu(in[0]), seed);
                     }});
    cases.push_back({"gelu",
                     {randn({4, 6})},
                     [seed](Graph& g, const std::vector<Ref>& in) {
                         return scalarize(g, g.gelu(in[0]), seed);
                     }});
    cases.push_back({"sigmoid",
                     {randn({4, 6})},
                     [seed](Graph& g, const std::vector<Ref>& in) {
                         return scalarize(g, g.sigmoid(in[0]), seed);
                     }});
    cases.push_back({"layernorm",
                     {randn({5, 8}), randn({8}), randn({8})},
                     [seed](Graph& g, const std::vector<Ref>& in) {
                         return scalarize(g, g.layernorm(in[0], in[1], in[2]), seed);
                     }});
    cases.push_back({"softmax_rows",
                     {randn({5, 7})},
                     [seed](Graph& g, const std::vector<Ref>& in) {
                         return scalarize(g, g.softmax_rows(in[0]), seed);
                     }});
    cases.push_back({"normalize_rows",
                     {randn({5, 7})},
                     [seed](Graph& g, const std::vector<Ref>& in) {
                         return scalarize(g, g.normalize_rows(in[0]), seed);
                     }});
    cases.push_back({"embedding",
                     {randn({9, 4})},
                     [seed](Graph& g, const std::vector<Ref>& in) {
                         std::vector<int> ids = {2, 7, 2, 0, 8, 3};
                         return scalarize(g, g.embedding(in[0], ids), seed);
                     }});
    cases.push_back({"gather_rows",
                     {randn({6, 4})},
                     [seed](Graph& g, const std::vector<Ref>& in) {
                         std::vector<int> ids = {5, 1, 1, 0};
                         return scalarize(g, g.gather_rows(in[0], ids), seed);
                     }});
    cases.push_back({"slice_concat",
                     {randn({6, 4}), randn({3, 4})},
                     [seed](Graph& g, const std::vector<Ref>& in) {
                         Ref a = g.slice_rows(in[0], 1, 4);
                         Ref b = g.concat_rows({a, in[1]});
                         return scalarize(g, b, seed);
                     }});
    cases.push_back({"reshape",
                     {randn({4, 6})},
                     [seed](Graph& g, const std::vector<Ref>& in) {
                         return scalarize(g, g.reshape(in[0], {2, 12}), seed);
                     }});
    cases.push_back({"mean_rows",
                     {randn({6, 5})},
                     [seed](Graph& g, const std::vector<Ref>& in) {
                         return scalarize(g, g.mean_rows(in[0]), seed);
                     }});
    cases.push_back({"sum_all",
                     {randn({4, 5})},
                     [](Graph& g, const std::vector<Ref>& in) { return g.sum_all(in[0]); }});
    cases.push_back({"weighted_sum",
                     {randn({3, 3}), randn({3, 3})},
                     [](Graph& g, const std::vector<Ref>& in) {
                         Ref a = g.sum_all(in[0]);
                         Ref b = g.sum_all(in[1]);
                         return g.weighted_sum({a, b}, {0.3f, -1.2f});
                     }});
    cases.push_back({"cross_entropy_mean",
                     {randn({6, 7})},
                     [](Graph& g, const std::vector<Ref>& in) {
                         std::vector<int> ids = {1, 4, -1, 0, 6, 3};
                         std::vector<float> w = {1.0f, 0.5f, 1.0f, 2.0f, 1.0f, 0.0f};
                         return g.cross_entropy(in[0], ids, w, true);
                     }});
    cases.push_back({"cross_entropy_sum",
                     {randn({5, 6})},
                     [](Graph& g, const std::vector<Ref>& in) {
                         std::vector<int> ids = {0, 5, 2, 2, 1};
                         std::vector<float> w = {1.0f, 1.0f, 1.0f, 1.0f, 1.0f};
                         return g.cross_entropy(in[0], ids, w, false);
                     }});
    cases.push_back({"mse",
                     {randn({4, 5}), randn({4, 5})},
                     [](Graph& g, const std::vector<Ref>& in) { return g.mse(in[0], in[1]); }});
    {
        int B = 2, T = 5, d = 8, heads = 2, prefix = 2;
        auto mask = std::make_shared<AttnMask>(B, T);
        for (int b = 0; b < B; ++b)
            for (int i = 0; i < T; ++i)
                for (int j = 0; j < T; ++j) {
                    bool ok = (i < prefix) ? (j < prefix) : (j <= i);
                    mask->set(b, i, j, ok);
                }
        cases.push_back({"attention",
                         {randn({B * T, d}), randn({B * T, d}), randn({B * T, d})},
                         [seed, mask, heads](Graph& g, const std::vector<Ref>& in) {
                             return scalarize(g, g.attention(in[0], in[1], in[2], mask, heads), seed);
                         }});
    }
    {
        int B = 2, Tq = 3, Tk = 5, d = 8, heads = 2;
        auto mask = std::make_shared<CrossMask>(B, Tq, Tk);
        for (int b = 0; b < B; ++b)
            for (int i = 0; i < Tq; ++i)
                for (int j = 0; j < Tk; ++j) mask->set(b, i, j, (b + i + j) % 5 != 0);
        cases.push_back({"cross_attention",
                         {randn({B * Tq, d}), randn({B * Tk, d}), randn({B * Tk, d})},
                         [seed, mask, heads](Graph& g, const std::vector<Ref>& in) {
                             return scalarize(
                                 g, g.cross_attention(in[0], in[1], in[2], mask, heads), seed);
                         }});
    }
    {
        int rows = 6, d = 8, heads = 2;
        auto pos = std::make_shared<RopePos>();
        pos->push(0, 0, false);
        pos->push(0, 0, false);
        pos->push(0, 0, true);
        pos->push(0, 1, true);
        pos->push(1, 0, true);
        pos->push(2, 3, true);
        cases.push_back({"rope2d",
                         {randn({rows, d})},
                         [seed, pos, heads](Graph& g, const std::vector<Ref>& in) {
                             return scalarize(g, g.rope2d(in[0], pos, heads), seed);
                         }});
    }
    cases.push_back({"conv2d_s1",
                     {randn({2, 3, 6, 6}), randn({4, 3, 3, 3}), randn({4})},
                     [seed](Graph& g, const std::vector<Ref>& in) {
                         return scalarize(g, g.conv2d(in[0], in[1], in[2], 1, 1), seed);
                     }});
    cases.push_back({"conv2d_s2",
                     {randn({2, 3, 8, 8}), randn({4, 3, 4, 4}), randn({4})},
                     [seed](Graph& g, const std::vector<Ref>& in) {
                         return scalarize(g, g.conv2d(in[0], in[1], in[2], 2, 1), seed);
                     }});
    cases.push_back({"upsample2x",
                     {randn({2, 3, 4, 4})},
                     [seed](Graph& g, const std::vector<Ref>& in) {
                         return scalarize(g, g.upsample2x(in[0]), seed);
                     }});
    cases.push_back({"chw_to_rows",
                     {randn({2, 5, 3, 4})},
                     [seed](Graph& g, const std::vector<Ref>& in) {
                         return scalarize(g, g.chw_to_rows(in[0]), seed);
                     }});
    cases.push_back({"rows_to_chw",
                     {randn({2 * 3 * 4, 5})},
                     [seed](Graph& g, const std::vector<Ref>& in) {
                         return scalarize(g, g.rows_to_chw(in[0], 5, 3, 4), seed);
                     }});
    cases.push_back({"patchify",
                     {randn({2, 3, 4, 6})},
                     [seed](Graph& g, const std::vector<Ref>& in) {
                         return scalarize(g, g.patchify(in[0], 2), seed);
                     }});
    return cases;
}

}  // namespace argen::testing
