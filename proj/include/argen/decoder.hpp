#pragma once

// Autoregressive image-token decoder. A causal transformer runs over
// [ context rows | BOS | image tokens ]: context rows form a fully visible
// prefix with learned 1D positions, image tokens get 2D rotary positions at
// their (row, col) grid coordinates, and every image position sees the whole
// context plus earlier tokens. Training uses teacher forcing with optional
// whole-context dropout to a learned unconditional row; sampling blends
// conditional and unconditional logits with a guidance scale, running both
// streams as one doubled batch over an incremental key/value cache.

#include "argen/encoder.hpp"
#include "argen/graph.hpp"
#include "argen/rng.hpp"
#include "argen/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace argen {

struct DecoderConfig {
    int layers = 8;
    int heads = 8;
    int d = 256;
    int ff = 0;          // 0 -> 4*d
    int vocab = 512;     // image code vocabulary
    int grid = 8;        // token grid side; sequence length is grid*grid
    int m_max = 336;     // context row budget

    void validate() const;  // ConfigError on bad values
    int ff_dim() const { return ff > 0 ? ff : 4 * d; }
    int tokens() const { return grid * grid; }
};

struct CfgConfig {
    float drop_p = 0.1f;      // training: whole-context dropout probability
    float guidance = 3.0f;    // sampling: logit blend scale
    std::string sampler = "greedy";  // "greedy" | "topk"
    float temperature = 1.0f;
    int top_k = 32;
    uint64_t seed = 0;

    void validate() const;
};

// Materialized context rows for frozen-weight sampling.
struct SampleContext {
    Tensor h;                    // [B*M, d]
    int B = 0;
    int M = 0;
    std::vector<uint8_t> valid;  // B*M

    static SampleContext from(const EncodedContext& ctx);
};

// Per-layer key/value rows for incrementally decoded streams. Stale caches
// (weights updated since capture) are rebuilt, never reused.
struct PrefixCache {
    uint64_t params_version = ~0ull;
    int streams = 0;
    int d = 0;
    int len = 0;       // rows processed per stream
    int capacity = 0;
    std::vector<std::vector<float>> k, v;  // per layer, [streams*capacity*d]

    void reset(int n_layers, int n_streams, int dim, int cap, uint64_t version);
};

// Guidance blend over one logit row: lg[j] = lu[j] + (lc[j] - lu[j]) * scale,
// carried out in double precision.
void cfg_blend(const float* lc, const float* lu, int k, float scale, double* lg);

class ArDecoder {
public:
    explicit ArDecoder(DecoderConfig cfg);

    void init(Rng& rng);  // create all parameters (names under "dec.")
    ParamStore& params() { return ps_; }
    const ParamStore& params() const { return ps_; }
    const DecoderConfig& config() const { return cfg_; }

    // Tape forward over a token prefix of length len (flat prefix[b*len+i]).
    // Returns len+1 logit rows per sample: positions BOS, y_1, ..., y_len.
    // CapacityError when len exceeds the grid or M exceeds m_max.
    Ref decoder_forward(Graph& g, const EncodedContext& ctx,
                        const std::vector<int>& prefix, int len);

    // Mean cross-entropy over all grid positions; targets flat [B*tokens()].
    Ref teacher_forcing_loss(Graph& g, const EncodedContext& ctx,
                             const std::vector<int>& targets);

    // Per-sample coin flip: with probability p the sample's context rows are
    // all replaced by the learned unconditional row (and marked fully valid).
    // Decisions are appended to *dropped when given.
    EncodedContext cfg_dropout(Graph& g, const EncodedContext& ctx, float p, Rng& rng,
                               std::vector<uint8_t>* dropped = nullptr);

    // Frozen-weight sampling: exactly tokens() ids per sample, flat [B*L].
    // Conditional and unconditional logits come from one doubled batch of
    // streams; blended in double precision as l_u + (l_c - l_u) * guidance.
    std::vector<int> sample(const SampleContext& ctx, const CfgConfig& cfg) const;

    // Reference decode that rebuilds the full forward pass every step
    // instead of extending a cache. Must match sample() token for token.
    std::vector<int> sample_uncached(const SampleContext& ctx, const CfgConfig& cfg) const;

private:
    struct StepState;
    void process_rows(StepState& st, PrefixCache& cache, int new_rows,
                      std::vector<float>& logits_out) const;
    std::vector<int> sample_impl(const SampleContext& ctx, const CfgConfig& cfg,
                                 bool cached) const;

    DecoderConfig cfg_;
    ParamStore ps_;
};

} // namespace argen
