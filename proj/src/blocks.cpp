#include "argen/blocks.hpp"

namespace argen {

void add_linear_params(ParamStore& ps, const std::string& prefix, int in, int out,
                       Rng& rng, float w_scale) {
    ps.add(prefix + ".w", Tensor::randn({in, out}, rng, w_scale));
    ps.add(prefix + ".b", Tensor::zeros({out}));
}

Ref linear(Graph& g, ParamStore& ps, const std::string& prefix, Ref x) {
    Ref w = g.param(*ps.find(prefix + ".w"));
    Ref b = g.param(*ps.find(prefix + ".b"));
    return g.add_bias(g.matmul(x, w), b);
}

void add_layernorm_params(ParamStore& ps, const std::string& prefix, int d) {
    ps.add(prefix + ".g", Tensor::full({d}, 1.0f));
    ps.add(prefix + ".b", Tensor::zeros({d}));
}

Ref layernorm_p(Graph& g, ParamStore& ps, const std::string& prefix, Ref x) {
    return g.layernorm(x, g.param(*ps.find(prefix + ".g")), g.param(*ps.find(prefix + ".b")));
}

void add_block_params(ParamStore& ps, const std::string& prefix, BlockDims dims, Rng& rng) {
    add_layernorm_params(ps, prefix + ".ln1", dims.d);
    add_linear_params(ps, prefix + ".q", dims.d, dims.d, rng);
    add_linear_params(ps, prefix + ".k", dims.d, dims.d, rng);
    add_linear_params(ps, prefix + ".v", dims.d, dims.d, rng);
    add_linear_params(ps, prefix + ".o", dims.d, dims.d, rng);
    add_layernorm_params(ps, prefix + ".ln2", dims.d);
    add_linear_params(ps, prefix + ".m1", dims.d, dims.ff, rng);
    add_linear_params(ps, prefix + ".m2", dims.ff, dims.d, rng);
}

Ref transformer_block(Graph& g, ParamStore& ps, const std::string& prefix, Ref x,
                      std::shared_ptr<AttnMask> mask, BlockDims dims,
                      std::shared_ptr<RopePos> rope_pos, float rope_base) {
    Ref a = layernorm_p(g, ps, prefix + ".ln1", x);
    Ref q = linear(g, ps, prefix + ".q", a);
    Ref k = linear(g, ps, prefix + ".k", a);
    Ref v = linear(g, ps, prefix + ".v", a);
    if (rope_pos) {
        q = g.rope2d(q, rope_pos, dims.heads, rope_base);
        k = g.rope2d(k, rope_pos, dims.heads, rope_base);
    }
    Ref attn = g.attention(q, k, v, mask, dims.heads);
    x = g.add(x, linear(g, ps, prefix + ".o", attn));

    Ref m = layernorm_p(g, ps, prefix + ".ln2", x);
    m = g.silu(linear(g, ps, prefix + ".m1", m));
    m = linear(g, ps, prefix + ".m2", m);
    return g.add(x, m);
}

void add_cross_block_params(ParamStore& ps, const std::string& prefix, BlockDims dims, Rng& rng) {
    add_block_params(ps, prefix, dims, rng);
    add_layernorm_params(ps, prefix + ".ln3", dims.d);
    add_layernorm_params(ps, prefix + ".lnkv", dims.d);
    add_linear_params(ps, prefix + ".xq", dims.d, dims.d, rng);
    add_linear_params(ps, prefix + ".xk", dims.d, dims.d, rng);
    add_linear_params(ps, prefix + ".xv", dims.d, dims.d, rng);
    add_linear_params(ps, prefix + ".xo", dims.d, dims.d, rng);
}

Ref cross_block(Graph& g, ParamStore& ps, const std::string& prefix, Ref x, Ref kv,
                std::shared_ptr<AttnMask> self_mask, std::shared_ptr<CrossMask> cross_mask,
                BlockDims dims) {
    Ref a = layernorm_p(g, ps, prefix + ".ln1", x);
    Ref q = linear(g, ps, prefix + ".q", a);
    Ref k = linear(g, ps, prefix + ".k", a);
    Ref v = linear(g, ps, prefix + ".v", a);
    Ref attn = g.attention(q, k, v, self_mask, dims.heads);
    x = g.add(x, linear(g, ps, prefix + ".o", attn));

    Ref cq = linear(g, ps, prefix + ".xq", layernorm_p(g, ps, prefix + ".ln3", x));
    Ref kvn = layernorm_p(g, ps, prefix + ".lnkv", kv);
    Ref ck = linear(g, ps, prefix + ".xk", kvn);
    Ref cv = linear(g, ps, prefix + ".xv", kvn);
    Ref cross = g.cross_attention(cq, ck, cv, cross_mask, dims.heads);
    x = g.add(x, linear(g, ps, prefix + ".xo", cross));

    Ref m = layernorm_p(g, ps, prefix + ".ln2", x);
    m = g.silu(linear(g, ps, prefix + ".m1", m));
    m = linear(g, ps, prefix + ".m2", m);
    return g.add(x, m);
}

} // namespace argen
