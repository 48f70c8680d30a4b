#pragma once

// Shared transformer building blocks: pre-LN self-attention blocks, an
// optional cross-attention sublayer, and small linear/layernorm helpers.
// Parameters live in a ParamStore under a caller-chosen name prefix; the
// add_* functions create them once, the build functions look them up.

#include "argen/graph.hpp"
#include "argen/rng.hpp"

#include <memory>
#include <string>

namespace argen {

struct BlockDims {
    int d = 256;
    int heads = 4;
    int ff = 1024;
};

// Linear layer params {prefix}.w [in,out] and {prefix}.b [out].
void add_linear_params(ParamStore& ps, const std::string& prefix, int in, int out,
                       Rng& rng, float w_scale = 0.02f);
Ref linear(Graph& g, ParamStore& ps, const std::string& prefix, Ref x);

// Layernorm params {prefix}.g (ones) and {prefix}.b (zeros), both [d].
void add_layernorm_params(ParamStore& ps, const std::string& prefix, int d);
Ref layernorm_p(Graph& g, ParamStore& ps, const std::string& prefix, Ref x);

// Pre-LN block: x += attn(ln1(x)); x += mlp(ln2(x)).
// Params: {prefix}.ln1 {prefix}.q/k/v/o {prefix}.ln2 {prefix}.m1/m2.
// If rope_pos is set, rotary positions are applied to q and k.
void add_block_params(ParamStore& ps, const std::string& prefix, BlockDims dims, Rng& rng);
Ref transformer_block(Graph& g, ParamStore& ps, const std::string& prefix, Ref x,
                      std::shared_ptr<AttnMask> mask, BlockDims dims,
                      std::shared_ptr<RopePos> rope_pos = nullptr,
                      float rope_base = 10000.0f);

// Pre-LN block with an extra cross-attention sublayer between self-attention
// and the MLP: x += self_attn(ln1(x)); x += cross_attn(ln3(x), lnkv(kv));
// x += mlp(ln2(x)). kv is a separate row tensor (keys and values).
// Extra params: {prefix}.ln3 {prefix}.lnkv {prefix}.xq/xk/xv/xo.
void add_cross_block_params(ParamStore& ps, const std::string& prefix, BlockDims dims, Rng& rng);
Ref cross_block(Graph& g, ParamStore& ps, const std::string& prefix, Ref x, Ref kv,
                std::shared_ptr<AttnMask> self_mask, std::shared_ptr<CrossMask> cross_mask,
                BlockDims dims);

} // namespace argen
