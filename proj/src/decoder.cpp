#include "argen/decoder.hpp"

#include "argen/blocks.hpp"
#include "argen/error.hpp"
#include "argen/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace argen {

void DecoderConfig::validate() const {
    ARGEN_CHECK(d > 0 && heads > 0 && d % heads == 0, ConfigError,
                "decoder: d must be positive and divisible by heads");
    ARGEN_CHECK((d / heads) % 4 == 0, ConfigError,
                "decoder: head dim must be a multiple of 4 for 2D rotary pairs");
    ARGEN_CHECK(layers >= 1, ConfigError, "decoder: need at least one layer");
    ARGEN_CHECK(vocab >= 2, ConfigError, "decoder: token vocabulary too small");
    ARGEN_CHECK(grid >= 1, ConfigError, "decoder: grid must be positive");
    ARGEN_CHECK(m_max >= 1, ConfigError, "decoder: m_max must be positive");
}

void CfgConfig::validate() const {
    ARGEN_CHECK(drop_p >= 0.0f && drop_p <= 1.0f, ConfigError,
                "cfg: drop probability must lie in [0,1]");
    ARGEN_CHECK(guidance >= 0.0f, ConfigError, "cfg: guidance scale must be >= 0");
    ARGEN_CHECK(sampler == "greedy" || sampler == "topk", ConfigError,
                "cfg: sampler must be greedy or topk");
    if (sampler == "topk") {
        ARGEN_CHECK(temperature > 0.0f, ConfigError, "cfg: temperature must be > 0");
        ARGEN_CHECK(top_k >= 1, ConfigError, "cfg: top_k must be >= 1");
    }
}

SampleContext SampleContext::from(const EncodedContext& ctx) {
    SampleContext s;
    s.h = ctx.h.val();
    s.B = ctx.B;
    s.M = ctx.M;
    s.valid = ctx.valid;
    return s;
}

void PrefixCache::reset(int n_layers, int n_streams, int dim, int cap, uint64_t version) {
    params_version = version;
    streams = n_streams;
    d = dim;
    len = 0;
    capacity = cap;
    k.assign(size_t(n_layers), std::vector<float>(size_t(n_streams) * cap * dim, 0.0f));
    v = k;
}

ArDecoder::ArDecoder(DecoderConfig cfg) : cfg_(cfg) {
    cfg_.validate();
}

void ArDecoder::init(Rng& rng) {
    const int d = cfg_.d;
    BlockDims dims{d, cfg_.heads, cfg_.ff_dim()};
    ps_.add("dec.tok", Tensor::randn({cfg_.vocab, d}, rng, 0.02f));
    ps_.add("dec.ctxpos", Tensor::randn({cfg_.m_max, d}, rng, 0.02f));
    ps_.add("dec.bos", Tensor::randn({1, d}, rng, 0.02f));
    ps_.add("dec.hu", Tensor::randn({1, d}, rng, 0.02f));
    for (int i = 0; i < cfg_.layers; ++i)
        add_block_params(ps_, "dec.b" + std::to_string(i), dims, rng);
    add_layernorm_params(ps_, "dec.lnf", d);
    add_linear_params(ps_, "dec.head", d, cfg_.vocab, rng);
}

// Visibility inside one sample's [context | BOS | tokens] sequence. valid
// covers the M context rows; null means all context rows are live.
static bool seq_allow(int i, int j, int M, const uint8_t* valid) {
    auto live = [&](int r) { return valid == nullptr || valid[r] != 0; };
    if (i < M) {
        if (!live(i)) return i == j;  // dead context rows keep a self-edge
        return j < M && live(j);      // context prefix is bidirectional
    }
    if (j < M) return live(j);  // BOS and tokens see the live context
    return j <= i;              // plus BOS and earlier tokens, causally
}

Ref ArDecoder::decoder_forward(Graph& g, const EncodedContext& ctx,
                               const std::vector<int>& prefix, int len) {
    const int B = ctx.B, M = ctx.M, d = cfg_.d, L = cfg_.tokens();
    ARGEN_CHECK(len >= 0 && len <= L, CapacityError,
                "decoder: prefix of " + std::to_string(len) + " tokens exceeds the " +
                    std::to_string(L) + "-token grid");
    ARGEN_CHECK(M <= cfg_.m_max, CapacityError,
                "decoder: " + std::to_string(M) + " context rows exceed m_max " +
                    std::to_string(cfg_.m_max));
    ARGEN_CHECK(int(prefix.size()) == B * len, ShapeError, "decoder: prefix size mismatch");
    for (int id : prefix)
        ARGEN_CHECK(id >= 0 && id < cfg_.vocab, IndexError, "decoder: token id out of range");
    const int T = M + 1 + len;

    std::vector<int> pos_ids(size_t(B) * M);
    for (int b = 0; b < B; ++b)
        for (int m = 0; m < M; ++m) pos_ids[size_t(b) * M + m] = m;
    Ref hpos = g.add(ctx.h, g.embedding(g.param(*ps_.find("dec.ctxpos")), pos_ids));

    Ref bos = g.gather_rows(g.param(*ps_.find("dec.bos")), std::vector<int>(size_t(B), 0));
    std::vector<Ref> parts{hpos, bos};
    if (len > 0) parts.push_back(g.embedding(g.param(*ps_.find("dec.tok")), prefix));
    Ref all = g.concat_rows(parts);

    std::vector<int> sel(size_t(B) * T);
    for (int b = 0; b < B; ++b)
        for (int t = 0; t < T; ++t) {
            int src;
            if (t < M)
                src = b * M + t;
            else if (t == M)
                src = B * M + b;
            else
                src = B * M + B + b * len + (t - M - 1);
            sel[size_t(b) * T + t] = src;
        }
    Ref x = g.gather_rows(all, sel);

    auto pos = std::make_shared<RopePos>();
    for (int b = 0; b < B; ++b)
        for (int t = 0; t < T; ++t) {
            if (t <= M) {
                pos->push(0, 0, false);
            } else {
                int i = t - M - 1;
                pos->push(i / cfg_.grid, i % cfg_.grid, true);
            }
        }

    auto mask = std::make_shared<AttnMask>(B, T);
    for (int b = 0; b < B; ++b) {
        const uint8_t* valid = ctx.valid.data() + size_t(b) * M;
        for (int i = 0; i < T; ++i)
            for (int j = 0; j < T; ++j) mask->set(b, i, j, seq_allow(i, j, M, valid));
    }

    BlockDims dims{d, cfg_.heads, cfg_.ff_dim()};
    for (int l = 0; l < cfg_.layers; ++l)
        x = transformer_block(g, ps_, "dec.b" + std::to_string(l), x, mask, dims, pos);

    std::vector<int> emit(size_t(B) * (len + 1));
    for (int b = 0; b < B; ++b)
        for (int i = 0; i <= len; ++i) emit[size_t(b) * (len + 1) + i] = b * T + M + i;
    Ref out = g.gather_rows(x, emit);
    out = layernorm_p(g, ps_, "dec.lnf", out);
    return linear(g, ps_, "dec.head", out);
}

Ref ArDecoder::teacher_forcing_loss(Graph& g, const EncodedContext& ctx,
                                    const std::vector<int>& targets) {
    const int B = ctx.B, L = cfg_.tokens();
    ARGEN_CHECK(int(targets.size()) == B * L, ShapeError,
                "teacher forcing: targets must hold B*" + std::to_string(L) + " ids");
    const int len = L - 1;
    std::vector<int> prefix(size_t(B) * len);
    for (int b = 0; b < B; ++b)
        for (int i = 0; i < len; ++i) prefix[size_t(b) * len + i] = targets[size_t(b) * L + i];
    Ref logits = decoder_forward(g, ctx, prefix, len);
    return g.cross_entropy(logits, targets, std::vector<float>(targets.size(), 1.0f), true);
}

EncodedContext ArDecoder::cfg_dropout(Graph& g, const EncodedContext& ctx, float p, Rng& rng,
                                      std::vector<uint8_t>* dropped) {
    ARGEN_CHECK(p >= 0.0f && p <= 1.0f, ConfigError, "cfg dropout: p must lie in [0,1]");
    const int B = ctx.B, M = ctx.M;
    std::vector<uint8_t> drop(static_cast<size_t>(B));
    bool any = false;
    for (int b = 0; b < B; ++b) {
        drop[size_t(b)] = rng.uniform() < double(p) ? 1 : 0;
        any = any || drop[size_t(b)];
    }
    if (dropped) dropped->insert(dropped->end(), drop.begin(), drop.end());

    EncodedContext out = ctx;
    if (!any) return out;

    Ref all = g.concat_rows({ctx.h, g.param(*ps_.find("dec.hu"))});
    std::vector<int> sel(size_t(B) * M);
    for (int b = 0; b < B; ++b)
        for (int m = 0; m < M; ++m)
            sel[size_t(b) * M + m] = drop[size_t(b)] ? B * M : b * M + m;
    out.h = g.gather_rows(all, sel);
    for (int b = 0; b < B; ++b)
        if (drop[size_t(b)])
            std::fill(out.valid.begin() + size_t(b) * M,
                      out.valid.begin() + size_t(b) * M + M, uint8_t(1));
    return out;
}

// ---- frozen-weight sampling ------------------------------------------------

namespace {

// Mirrors the tape layernorm: double mean/var, float rstd, eps 1e-5.
void ln_rows(float* out, const float* x, int rows, int n, const float* g, const float* b) {
    for (int i = 0; i < rows; ++i) {
        const float* row = x + int64_t(i) * n;
        double mu = 0.0;
        for (int j = 0; j < n; ++j) mu += row[j];
        mu /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) {
            double d = row[j] - mu;
            var += d * d;
        }
        var /= n;
        float rs = float(1.0 / std::sqrt(var + 1e-5));
        float* o = out + int64_t(i) * n;
        for (int j = 0; j < n; ++j) o[j] = (row[j] - float(mu)) * rs * g[j] + b[j];
    }
}

void silu_rows(float* x, int64_t n) {
    for (int64_t i = 0; i < n; ++i) x[i] = x[i] / (1.0f + std::exp(-x[i]));
}

} // namespace

// One decoding step for all streams: R new rows per stream enter the stack,
// their keys/values extend the cache, and the logits of each stream's last
// row come back. Mirrors the tape ops' arithmetic exactly.
struct ArDecoder::StepState {
    int S = 0;                       // streams
    int M = 0;                       // context rows per stream
    std::vector<float> x;            // [S*R, d] rows entering the block
    std::vector<int> abs0;           // absolute index of the first new row
    std::vector<uint8_t> valid;      // [S*M] context validity per stream
    // weights, resolved once
    struct Layer {
        const float *ln1g, *ln1b, *ln2g, *ln2b;
        const float *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
        const float *w1, *b1, *w2, *b2;
    };
    std::vector<Layer> layers;
    const float *lnfg, *lnfb, *headw, *headb;
};

void ArDecoder::process_rows(StepState& st, PrefixCache& cache, int R,
                             std::vector<float>& logits_out) const {
    const int S = st.S, d = cfg_.d, H = cfg_.heads, dh = d / H, ff = cfg_.ff_dim();
    const int rows = S * R;
    const int base = cache.len;
    const float sc = 1.0f / std::sqrt(float(dh));

    // rotary positions for the R new rows (same for every stream)
    RopePos pos;
    for (int s = 0; s < S; ++s)
        for (int r = 0; r < R; ++r) {
            int abs = base + r;
            if (abs <= st.M) {
                pos.push(0, 0, false);
            } else {
                int i = abs - st.M - 1;
                pos.push(i / cfg_.grid, i % cfg_.grid, true);
            }
        }

    std::vector<float> a(size_t(rows) * d), q(size_t(rows) * d), k(size_t(rows) * d),
        v(size_t(rows) * d), attn(size_t(rows) * d), proj(size_t(rows) * d),
        m1(size_t(rows) * ff);

    for (int l = 0; l < cfg_.layers; ++l) {
        const auto& W = st.layers[size_t(l)];
        ln_rows(a.data(), st.x.data(), rows, d, W.ln1g, W.ln1b);
        kernels::gemm_nn(q.data(), a.data(), W.wq, rows, d, d, false);
        kernels::gemm_nn(k.data(), a.data(), W.wk, rows, d, d, false);
        kernels::gemm_nn(v.data(), a.data(), W.wv, rows, d, d, false);
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < d; ++j) {
                q[size_t(i) * d + j] += W.bq[j];
                k[size_t(i) * d + j] += W.bk[j];
                v[size_t(i) * d + j] += W.bv[j];
            }
        rope2d_apply(q.data(), rows, d, pos, H, 10000.0f, +1);
        rope2d_apply(k.data(), rows, d, pos, H, 10000.0f, +1);

        float* ck = cache.k[size_t(l)].data();
        float* cv = cache.v[size_t(l)].data();
        for (int s = 0; s < S; ++s)
            for (int r = 0; r < R; ++r) {
                std::memcpy(ck + (int64_t(s) * cache.capacity + base + r) * d,
                            k.data() + (int64_t(s) * R + r) * d, size_t(d) * sizeof(float));
                std::memcpy(cv + (int64_t(s) * cache.capacity + base + r) * d,
                            v.data() + (int64_t(s) * R + r) * d, size_t(d) * sizeof(float));
            }

        const int total = base + R;
        std::vector<float> pr(static_cast<size_t>(total));
#pragma omp parallel for schedule(static) firstprivate(pr)
        for (int sh = 0; sh < S * H; ++sh) {
            int s = sh / H, h = sh % H;
            int off = h * dh;
            const uint8_t* valid = st.valid.data() + size_t(s) * st.M;
            for (int r = 0; r < R; ++r) {
                const int i = base + r;
                const float* qi = q.data() + (int64_t(s) * R + r) * d + off;
                float mx = -1e30f;
                for (int j = 0; j < total; ++j) {
                    if (!seq_allow(i, j, st.M, valid)) {
                        pr[size_t(j)] = 0.0f;
                        continue;
                    }
                    const float* kj = ck + (int64_t(s) * cache.capacity + j) * d + off;
                    float sdot = 0.0f;
                    for (int t = 0; t < dh; ++t) sdot += qi[t] * kj[t];
                    pr[size_t(j)] = sdot * sc;
                    mx = std::max(mx, pr[size_t(j)]);
                }
                float denom = 0.0f;
                for (int j = 0; j < total; ++j) {
                    if (!seq_allow(i, j, st.M, valid)) continue;
                    pr[size_t(j)] = std::exp(pr[size_t(j)] - mx);
                    denom += pr[size_t(j)];
                }
                float inv = denom > 0.0f ? 1.0f / denom : 0.0f;
                float* oi = attn.data() + (int64_t(s) * R + r) * d + off;
                for (int t = 0; t < dh; ++t) oi[t] = 0.0f;
                for (int j = 0; j < total; ++j) {
                    if (!seq_allow(i, j, st.M, valid)) continue;
                    float p = pr[size_t(j)] * inv;
                    const float* vj = cv + (int64_t(s) * cache.capacity + j) * d + off;
                    for (int t = 0; t < dh; ++t) oi[t] += p * vj[t];
                }
            }
        }

        kernels::gemm_nn(proj.data(), attn.data(), W.wo, rows, d, d, false);
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < d; ++j)
                st.x[size_t(i) * d + j] += proj[size_t(i) * d + j] + W.bo[j];

        ln_rows(a.data(), st.x.data(), rows, d, W.ln2g, W.ln2b);
        kernels::gemm_nn(m1.data(), a.data(), W.w1, rows, d, ff, false);
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < ff; ++j) m1[size_t(i) * ff + j] += W.b1[j];
        silu_rows(m1.data(), int64_t(rows) * ff);
        kernels::gemm_nn(proj.data(), m1.data(), W.w2, rows, ff, d, false);
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < d; ++j)
                st.x[size_t(i) * d + j] += proj[size_t(i) * d + j] + W.b2[j];
    }
    cache.len += R;

    // logits for each stream's last new row
    const int K = cfg_.vocab;
    logits_out.assign(size_t(S) * K, 0.0f);
    std::vector<float> last(size_t(S) * d), lnf(size_t(S) * d);
    for (int s = 0; s < S; ++s)
        std::memcpy(last.data() + size_t(s) * d,
                    st.x.data() + (int64_t(s) * R + (R - 1)) * d, size_t(d) * sizeof(float));
    ln_rows(lnf.data(), last.data(), S, d, st.lnfg, st.lnfb);
    kernels::gemm_nn(logits_out.data(), lnf.data(), st.headw, S, d, K, false);
    for (int s = 0; s < S; ++s)
        for (int j = 0; j < K; ++j) logits_out[size_t(s) * K + j] += st.headb[j];
}

void cfg_blend(const float* lc, const float* lu, int k, float scale, double* lg) {
    for (int j = 0; j < k; ++j)
        lg[j] = double(lu[j]) + (double(lc[j]) - double(lu[j])) * double(scale);
}

std::vector<int> ArDecoder::sample(const SampleContext& ctx, const CfgConfig& cfg) const {
    return sample_impl(ctx, cfg, true);
}

std::vector<int> ArDecoder::sample_uncached(const SampleContext& ctx, const CfgConfig& cfg) const {
    return sample_impl(ctx, cfg, false);
}

std::vector<int> ArDecoder::sample_impl(const SampleContext& ctx, const CfgConfig& cfg,
                                        bool cached) const {
    cfg.validate();
    const int B = ctx.B, M = ctx.M, d = cfg_.d, L = cfg_.tokens(), K = cfg_.vocab;
    ARGEN_CHECK(B > 0, ShapeError, "sample: empty batch");
    ARGEN_CHECK(M <= cfg_.m_max, CapacityError, "sample: context rows exceed m_max");
    ARGEN_CHECK(ctx.h.shape_is({B * M, d}), ShapeError, "sample: context shape mismatch");
    ARGEN_CHECK(int(ctx.valid.size()) == B * M, ShapeError, "sample: validity size mismatch");
    const int S = 2 * B;  // streams: B conditional then B unconditional

    StepState st;
    st.S = S;
    st.M = M;
    st.layers.resize(size_t(cfg_.layers));
    auto w = [&](const std::string& name) { return ps_.find(name)->value.data(); };
    for (int l = 0; l < cfg_.layers; ++l) {
        std::string p = "dec.b" + std::to_string(l);
        auto& W = st.layers[size_t(l)];
        W.ln1g = w(p + ".ln1.g"), W.ln1b = w(p + ".ln1.b");
        W.ln2g = w(p + ".ln2.g"), W.ln2b = w(p + ".ln2.b");
        W.wq = w(p + ".q.w"), W.bq = w(p + ".q.b");
        W.wk = w(p + ".k.w"), W.bk = w(p + ".k.b");
        W.wv = w(p + ".v.w"), W.bv = w(p + ".v.b");
        W.wo = w(p + ".o.w"), W.bo = w(p + ".o.b");
        W.w1 = w(p + ".m1.w"), W.b1 = w(p + ".m1.b");
        W.w2 = w(p + ".m2.w"), W.b2 = w(p + ".m2.b");
    }
    st.lnfg = w("dec.lnf.g"), st.lnfb = w("dec.lnf.b");
    st.headw = w("dec.head.w"), st.headb = w("dec.head.b");
    const float* ctxpos = w("dec.ctxpos");
    const float* bosrow = w("dec.bos");
    const float* hurow = w("dec.hu");
    const float* tok = w("dec.tok");

    st.valid.assign(size_t(S) * M, 1);
    for (int b = 0; b < B; ++b)
        std::memcpy(st.valid.data() + size_t(b) * M, ctx.valid.data() + size_t(b) * M,
                    size_t(M));

    // context + BOS rows per stream; unconditional streams broadcast hu
    std::vector<float> prefix_rows(size_t(S) * (M + 1) * d);
    for (int s = 0; s < S; ++s) {
        float* dst = prefix_rows.data() + int64_t(s) * (M + 1) * d;
        for (int m = 0; m < M; ++m) {
            const float* srcrow = s < B ? ctx.h.data() + (int64_t(s) * M + m) * d : hurow;
            for (int j = 0; j < d; ++j)
                dst[int64_t(m) * d + j] = srcrow[j] + ctxpos[int64_t(m) * d + j];
        }
        std::memcpy(dst + int64_t(M) * d, bosrow, size_t(d) * sizeof(float));
    }

    PrefixCache cache;
    std::vector<int> out(size_t(B) * L, 0);
    std::vector<float> logits;
    std::vector<double> blend(static_cast<size_t>(K));
    Rng rng(cfg.seed);
    std::vector<std::pair<float, int>> heap;

    auto pick = [&](int b) {
        const float* lc = logits.data() + size_t(b) * K;
        const float* lu = logits.data() + size_t(B + b) * K;
        cfg_blend(lc, lu, K, cfg.guidance, blend.data());
        if (cfg.sampler == "greedy") {
            int best = 0;
            for (int j = 1; j < K; ++j)
                if (blend[size_t(j)] > blend[size_t(best)]) best = j;
            return best;
        }
        const int kk = std::min(cfg.top_k, K);
        heap.clear();
        for (int j = 0; j < K; ++j) heap.emplace_back(float(blend[size_t(j)]), j);
        std::partial_sort(heap.begin(), heap.begin() + kk, heap.end(),
                          [](const auto& a, const auto& b) {
                              return a.first > b.first || (a.first == b.first && a.second < b.second);
                          });
        double mx = heap[0].first;
        double denom = 0.0;
        std::vector<double> pw(static_cast<size_t>(kk));
        for (int j = 0; j < kk; ++j) {
            pw[size_t(j)] = std::exp((double(heap[size_t(j)].first) - mx) / double(cfg.temperature));
            denom += pw[size_t(j)];
        }
        double u = rng.uniform() * denom;
        double acc = 0.0;
        for (int j = 0; j < kk; ++j) {
            acc += pw[size_t(j)];
            if (u < acc) return heap[size_t(j)].second;
        }
        return heap[size_t(kk) - 1].second;
    };

    const uint64_t version = ps_.version();
    for (int step = 0; step < L; ++step) {
        if (!cached || step == 0) {
            // (re)build from scratch: all prefix rows plus tokens decoded so far
            cache.reset(cfg_.layers, S, d, M + 1 + L, version);
            const int R = M + 1 + step;
            st.x.assign(size_t(S) * R * d, 0.0f);
            for (int s = 0; s < S; ++s) {
                float* dst = st.x.data() + int64_t(s) * R * d;
                std::memcpy(dst, prefix_rows.data() + int64_t(s) * (M + 1) * d,
                            size_t(M + 1) * d * sizeof(float));
                for (int i = 0; i < step; ++i) {
                    int id = out[size_t(s % B) * L + i];
                    std::memcpy(dst + int64_t(M + 1 + i) * d, tok + int64_t(id) * d,
                                size_t(d) * sizeof(float));
                }
            }
            process_rows(st, cache, R, logits);
        } else {
            ARGEN_CHECK(cache.params_version == version, NumericError,
                        "sample: prefix cache went stale mid-decode");
            st.x.assign(size_t(S) * d, 0.0f);
            for (int s = 0; s < S; ++s) {
                int id = out[size_t(s % B) * L + step - 1];
                std::memcpy(st.x.data() + int64_t(s) * d, tok + int64_t(id) * d,
                            size_t(d) * sizeof(float));
            }
            process_rows(st, cache, 1, logits);
        }
        for (int b = 0; b < B; ++b) out[size_t(b) * L + step] = pick(b);
    }
    return out;
}

} // namespace argen
