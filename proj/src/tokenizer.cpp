#include "argen/tokenizer.hpp"

#include <algorithm>
#include <cmath>

#include "argen/error.hpp"

namespace argen {

namespace {

Tensor conv_init(int oc, int ic, int k, Rng& rng) {
    Tensor w = Tensor::randn({oc, ic, k, k}, rng);
    float s = std::sqrt(2.0f / float(ic * k * k));
    for (int64_t i = 0; i < w.numel(); ++i) w[i] *= s;
    return w;
}

}  // namespace

VqTokenizer::VqTokenizer(TokenizerConfig cfg) : cfg_(cfg) {
    ARGEN_CHECK(cfg_.image_size % 8 == 0, ConfigError, "tokenizer: image_size must divide by 8");
    ARGEN_CHECK(cfg_.codebook_size >= 1, ConfigError, "tokenizer: empty codebook");
    usage_.assign(size_t(cfg_.codebook_size), 0);
}

void VqTokenizer::init(uint64_t seed) {
    Rng rng(mix_u64(seed, 0x746f6bull));
    int c1 = cfg_.base_channels, c2 = 2 * cfg_.base_channels, cd = cfg_.code_dim;
    ps_.add("tok.enc1.w", conv_init(c1, 3, 3, rng));
    ps_.add("tok.enc1.b", Tensor::zeros({c1}));
    ps_.add("tok.enc2.w", conv_init(c2, c1, 3, rng));
    ps_.add("tok.enc2.b", Tensor::zeros({c2}));
    ps_.add("tok.enc3.w", conv_init(c2, c2, 3, rng));
    ps_.add("tok.enc3.b", Tensor::zeros({c2}));
    ps_.add("tok.enc4.w", conv_init(cd, c2, 3, rng));
    ps_.add("tok.enc4.b", Tensor::zeros({cd}));
    Tensor cb = Tensor::randn({cfg_.codebook_size, cd}, rng);
    for (int64_t i = 0; i < cb.numel(); ++i) cb[i] *= 0.2f;
    ps_.add("tok.codebook", std::move(cb));
    ps_.add("tok.dec1.w", conv_init(c2, cd, 3, rng));
    ps_.add("tok.dec1.b", Tensor::zeros({c2}));
    ps_.add("tok.dec2.w", conv_init(c2, c2, 3, rng));
    ps_.add("tok.dec2.b", Tensor::zeros({c2}));
    ps_.add("tok.dec3.w", conv_init(c1, c2, 3, rng));
    ps_.add("tok.dec3.b", Tensor::zeros({c1}));
    ps_.add("tok.dec4.w", conv_init(3, c1, 3, rng));
    ps_.add("tok.dec4.b", Tensor::zeros({3}));
}

namespace {

Ref pget(ParamStore& ps, Graph& g, const char* name) {
    Parameter* p = ps.find(name);
    ARGEN_CHECK(p != nullptr, ConfigError, std::string("tokenizer: uninitialized param ") + name);
    return g.param(*p);
}

}  // namespace

Ref VqTokenizer::encode_graph(Graph& g, Ref images) const {
    auto& ps = const_cast<ParamStore&>(ps_);
    const Tensor& x = g.value(images);
    ARGEN_CHECK(x.ndim() == 4 && x.size(1) == 3, ShapeError, "tok_encode: need [B,3,H,W]");
    ARGEN_CHECK(x.size(2) % 8 == 0 && x.size(3) % 8 == 0, ShapeError,
                "tok_encode: H and W must divide by 8");
    Ref h = g.silu(g.conv2d(images, pget(ps, g, "tok.enc1.w"), pget(ps, g, "tok.enc1.b"), 2, 1));
    h = g.silu(g.conv2d(h, pget(ps, g, "tok.enc2.w"), pget(ps, g, "tok.enc2.b"), 2, 1));
    h = g.silu(g.conv2d(h, pget(ps, g, "tok.enc3.w"), pget(ps, g, "tok.enc3.b"), 2, 1));
    h = g.conv2d(h, pget(ps, g, "tok.enc4.w"), pget(ps, g, "tok.enc4.b"), 1, 1);
    return g.chw_to_rows(h);
}

Ref VqTokenizer::decode_graph(Graph& g, Ref code_rows, int batch) const {
    auto& ps = const_cast<ParamStore&>(ps_);
    const Tensor& z = g.value(code_rows);
    ARGEN_CHECK(z.ndim() == 2 && z.size(1) == cfg_.code_dim, ShapeError,
                "tok_decode: need [rows, code_dim]");
    ARGEN_CHECK(z.size(0) == batch * seq_len(), ShapeError, "tok_decode: wrong row count");
    Ref h = g.rows_to_chw(code_rows, cfg_.code_dim, grid(), grid());
    h = g.silu(g.conv2d(h, pget(ps, g, "tok.dec1.w"), pget(ps, g, "tok.dec1.b"), 1, 1));
    h = g.upsample2x(h);
    h = g.silu(g.conv2d(h, pget(ps, g, "tok.dec2.w"), pget(ps, g, "tok.dec2.b"), 1, 1));
    h = g.upsample2x(h);
    h = g.silu(g.conv2d(h, pget(ps, g, "tok.dec3.w"), pget(ps, g, "tok.dec3.b"), 1, 1));
    h = g.upsample2x(h);
    return g.sigmoid(g.conv2d(h, pget(ps, g, "tok.dec4.w"), pget(ps, g, "tok.dec4.b"), 1, 1));
}

VqTokenizer::TrainRefs VqTokenizer::train_graph(Graph& g, const Tensor& images) {
    int B = images.size(0);
    Ref x = g.input(images);
    Ref z = encode_graph(g, x);
    Ref cb = pget(ps_, g, "tok.codebook");
    QuantizeResult q = g.quantize_st(z, cb);
    for (int idx : q.indices) usage_[size_t(idx)] += 1;
    Ref e = g.embedding(cb, q.indices);
    Ref code = g.mse(e, g.detach(z));
    Ref commit = g.mse(z, g.detach(e));
    Ref xhat = decode_graph(g, q.out, B);
    Ref recon = g.mse(xhat, x);
    Ref loss = g.weighted_sum({recon, code, commit}, {1.0f, 1.0f, cfg_.beta});
    return {loss, recon, code, commit, std::move(q.indices)};
}

Tensor VqTokenizer::tok_encode(const Tensor& images) {
    Graph g;
    Ref z = encode_graph(g, g.input(images));
    Tensor out = g.value(z);
    out.check_finite("tok_encode latents");
    return out;
}

VqTokenizer::Quantized VqTokenizer::quantize(const Tensor& latents) {
    ARGEN_CHECK(latents.ndim() == 2 && latents.size(1) == cfg_.code_dim, ShapeError,
                "quantize: need [rows, code_dim]");
    const Tensor& cb = ps_.find("tok.codebook")->value;
    int rows = latents.size(0), d = cfg_.code_dim, K = cfg_.codebook_size;
    Quantized out;
    out.indices.resize(size_t(rows));
    out.codes = Tensor({rows, d});
    for (int r = 0; r < rows; ++r) {
        int k = nearest_code(latents.data() + int64_t(r) * d, cb.data(), K, d);
        out.indices[size_t(r)] = k;
        usage_[size_t(k)] += 1;
        std::copy(cb.data() + int64_t(k) * d, cb.data() + int64_t(k + 1) * d,
                  out.codes.data() + int64_t(r) * d);
    }
    return out;
}

Tensor VqTokenizer::tok_decode(const std::vector<int>& indices) {
    ARGEN_CHECK(!indices.empty() && indices.size() % size_t(seq_len()) == 0, ShapeError,
                "tok_decode: index count must be a multiple of the grid size");
    for (int k : indices)
        ARGEN_CHECK(k >= 0 && k < cfg_.codebook_size, IndexError,
                    "tok_decode: index out of range");
    int B = int(indices.size()) / seq_len();
    Graph g;
    Ref e = g.embedding(pget(ps_, g, "tok.codebook"), indices);
    Tensor out = g.value(decode_graph(g, e, B));
    out.check_finite("tok_decode image");
    return out;
}

std::vector<int> VqTokenizer::encode_tokens(const Tensor& images) {
    return quantize(tok_encode(images)).indices;
}

int VqTokenizer::reseed_dead_codes(const std::vector<int64_t>& usage_before,
                                   const Tensor& latents, Rng& rng) {
    ARGEN_CHECK(usage_before.size() == usage_.size(), ShapeError,
                "reseed: usage snapshot size mismatch");
    if (latents.numel() == 0) return 0;
    int rows = latents.size(0), d = cfg_.code_dim;
    Tensor& cb = ps_.find("tok.codebook")->value;
    int reseeded = 0;
    for (int k = 0; k < cfg_.codebook_size; ++k) {
        if (usage_[size_t(k)] != usage_before[size_t(k)]) continue;
        int r = rng.rand_int(rows);
        for (int j = 0; j < d; ++j)
            cb[int64_t(k) * d + j] =
                latents[int64_t(r) * d + j] + float(rng.normal(0.0, 0.01));
        ++reseeded;
    }
    return reseeded;
}

TokTrainLog tok_train(VqTokenizer& tok, const std::vector<Image>& images,
                      const TokTrainConfig& cfg, Adam& opt, std::ostream* log) {
    ARGEN_CHECK(!images.empty(), DataError, "tok_train: empty dataset");
    ARGEN_CHECK(cfg.batch >= 1 && cfg.epochs >= 1, ConfigError, "tok_train: bad config");
    Rng root(cfg.seed);
    int n = int(images.size());
    int steps_per_epoch = (n + cfg.batch - 1) / cfg.batch;
    int64_t total_steps = int64_t(steps_per_epoch) * cfg.epochs;

    TokTrainLog out;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<int> order(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) order[size_t(i)] = i;
        Rng shuf = root.derive(0x7368ull, uint64_t(epoch));
        shuf.shuffle(order);

        std::vector<int64_t> usage0 = tok.usage();
        Tensor last_latents;
        double ep_loss = 0, ep_recon = 0;
        int ep_batches = 0;
        for (int b0 = 0; b0 < n; b0 += cfg.batch) {
            int bn = std::min(cfg.batch, n - b0);
            std::vector<Image> batch_imgs;
            batch_imgs.reserve(size_t(bn));
            for (int i = 0; i < bn; ++i) batch_imgs.push_back(images[size_t(order[size_t(b0 + i)])]);
            Tensor batch = images_to_batch(batch_imgs, 0, size_t(bn));

            Graph g;
            auto tr = tok.train_graph(g, batch);
            double loss = g.value(tr.loss)[0];
            ARGEN_CHECK(std::isfinite(loss), NumericError,
                        "tok_train: loss diverged at step " + std::to_string(out.steps));
            g.backward(tr.loss);
            double lr = lr_schedule(out.steps, total_steps, cfg.lr, cfg.warmup_frac);
            opt.step(tok.params(), lr, cfg.clip);

            ep_loss += loss;
            ep_recon += g.value(tr.recon)[0];
            ++ep_batches;
            ++out.steps;
            // the final batch's fresh latents seed any dead-code replacement
            if (b0 + cfg.batch >= n) {
                Graph gz;
                last_latents = gz.value(tok.encode_graph(gz, gz.input(batch)));
            }
        }
        Rng reseed_rng = root.derive(0x7265ull, uint64_t(epoch));
        int reseeded = tok.reseed_dead_codes(usage0, last_latents, reseed_rng);
        out.epoch_loss.push_back(ep_loss / ep_batches);
        out.epoch_recon.push_back(ep_recon / ep_batches);
        out.reseeded.push_back(reseeded);
        if (log)
            (*log) << "tok epoch " << epoch << " loss " << out.epoch_loss.back() << " recon "
                   << out.epoch_recon.back() << " reseeded " << reseeded << "\n";
    }
    return out;
}

double tok_eval_mse(VqTokenizer& tok, const std::vector<Image>& images, int batch) {
    ARGEN_CHECK(!images.empty(), DataError, "tok_eval_mse: empty dataset");
    double sum = 0;
    int64_t count = 0;
    for (size_t b0 = 0; b0 < images.size(); b0 += size_t(batch)) {
        size_t bn = std::min(size_t(batch), images.size() - b0);
        Tensor x = images_to_batch(images, b0, bn);
        Tensor xhat = tok.tok_decode(tok.encode_tokens(x));
        for (int64_t i = 0; i < x.numel(); ++i) {
            double d = double(x[i]) - xhat[i];
            sum += d * d;
        }
        count += x.numel();
    }
    return sum / double(count);
}

double token_idempotence(VqTokenizer& tok, const std::vector<Image>& images, int batch) {
    ARGEN_CHECK(!images.empty(), DataError, "token_idempotence: empty dataset");
    int64_t same = 0, total = 0;
    for (size_t b0 = 0; b0 < images.size(); b0 += size_t(batch)) {
        size_t bn = std::min(size_t(batch), images.size() - b0);
        Tensor x = images_to_batch(images, b0, bn);
        std::vector<int> t1 = tok.encode_tokens(x);
        std::vector<int> t2 = tok.encode_tokens(tok.tok_decode(t1));
        for (size_t i = 0; i < t1.size(); ++i) same += t1[i] == t2[i];
        total += int64_t(t1.size());
    }
    return double(same) / double(total);
}

}  // namespace argen
