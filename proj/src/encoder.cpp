#include "argen/encoder.hpp"

#include "argen/error.hpp"

#include <algorithm>

namespace argen {

void EncoderConfig::validate() const {
    ARGEN_CHECK(d > 0 && heads > 0 && d % heads == 0, ConfigError,
                "encoder: d must be positive and divisible by heads");
    ARGEN_CHECK(text_layers >= 1 && vis_layers >= 1, ConfigError,
                "encoder: need at least one text and one vision layer");
    ARGEN_CHECK(t_max > 0, ConfigError, "encoder: t_max must be positive");
    ARGEN_CHECK(vocab_size > 0, ConfigError, "encoder: vocab_size not set");
    ARGEN_CHECK(patch > 0 && image_size > 0 && image_size % patch == 0, ConfigError,
                "encoder: image_size must be a multiple of patch");
    ARGEN_CHECK(connector == "mlp" || connector == "query_distill", ConfigError,
                "encoder: connector must be mlp or query_distill");
    ARGEN_CHECK(mlp_dim() >= d, ConfigError, "encoder: mlp hidden width must be >= d");
    ARGEN_CHECK(n_query >= 1, ConfigError, "encoder: n_query must be >= 1");
    ARGEN_CHECK(query_layers >= 1, ConfigError, "encoder: query_layers must be >= 1");
    ARGEN_CHECK(max_images >= 1, ConfigError, "encoder: max_images must be >= 1");
}

int EncoderConfig::patches_per_image() const {
    int side = image_size / patch;
    return side * side;
}

MmEncoder::MmEncoder(EncoderConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
}

int MmEncoder::rows_per_image() const {
    return cfg_.connector == "mlp" ? cfg_.patches_per_image() : cfg_.n_query;
}

void MmEncoder::init(Rng& rng) {
    const int d = cfg_.d;
    BlockDims dims{d, cfg_.heads, cfg_.ff_dim()};

    ps_.add("enc.txt.tok", Tensor::randn({cfg_.vocab_size, d}, rng, 0.02f));
    ps_.add("enc.txt.pos", Tensor::randn({cfg_.t_max, d}, rng, 0.02f));
    for (int i = 0; i < cfg_.text_layers; ++i)
        add_block_params(ps_, "enc.txt.b" + std::to_string(i), dims, rng);

    const int P = cfg_.patches_per_image();
    add_linear_params(ps_, "enc.vis.patch", 3 * cfg_.patch * cfg_.patch, d, rng);
    ps_.add("enc.vis.pos", Tensor::randn({P, d}, rng, 0.02f));
    for (int i = 0; i < cfg_.vis_layers; ++i)
        add_block_params(ps_, "enc.vis.b" + std::to_string(i), dims, rng);

    if (cfg_.connector == "mlp") {
        add_linear_params(ps_, "enc.conn.m1", d, cfg_.mlp_dim(), rng);
        add_linear_params(ps_, "enc.conn.m2", cfg_.mlp_dim(), d, rng);
    } else {
        ps_.add("enc.conn.queries", Tensor::randn({cfg_.n_query, d}, rng, 0.02f));
        for (int i = 0; i < cfg_.query_layers; ++i)
            add_cross_block_params(ps_, "enc.conn.b" + std::to_string(i), dims, rng);
    }

    ps_.add("enc.ctx.mod", Tensor::zeros({2, d}));
    ps_.add("enc.ctx.imgidx", Tensor::zeros({cfg_.max_images, d}));
}

Ref MmEncoder::embed_text(Graph& g, const std::vector<int>& ids,
                          const std::vector<uint8_t>& mask, int B) {
    const int T = cfg_.t_max;
    ARGEN_CHECK(int(ids.size()) == B * T && mask.size() == ids.size(), ShapeError,
                "embed_text: ids/mask must hold B*t_max entries");

    std::vector<int> pos(ids.size());
    for (int b = 0; b < B; ++b)
        for (int t = 0; t < T; ++t) pos[size_t(b) * T + t] = t;

    Ref x = g.add(g.embedding(g.param(*ps_.find("enc.txt.tok")), ids),
                  g.embedding(g.param(*ps_.find("enc.txt.pos")), pos));

    auto m = std::make_shared<AttnMask>(B, T);
    for (int b = 0; b < B; ++b)
        for (int i = 0; i < T; ++i)
            for (int j = 0; j < T; ++j) {
                bool real_i = mask[size_t(b) * T + i] != 0;
                bool real_j = mask[size_t(b) * T + j] != 0;
                m->set(b, i, j, (real_i && real_j) || i == j);
            }

    BlockDims dims{cfg_.d, cfg_.heads, cfg_.ff_dim()};
    for (int i = 0; i < cfg_.text_layers; ++i)
        x = transformer_block(g, ps_, "enc.txt.b" + std::to_string(i),
                              x, m, dims);
    return x;
}

Ref MmEncoder::embed_image(Graph& g, Ref images, int N) {
    const int P = cfg_.patches_per_image();
    Ref patches = g.patchify(images, cfg_.patch);  // [N*P, 3*p*p]
    Ref x = linear(g, ps_, "enc.vis.patch", patches);

    std::vector<int> pos(size_t(N) * P);
    for (int n = 0; n < N; ++n)
        for (int p = 0; p < P; ++p) pos[size_t(n) * P + p] = p;
    x = g.add(x, g.embedding(g.param(*ps_.find("enc.vis.pos")), pos));

    auto m = std::make_shared<AttnMask>(N, P);
    std::fill(m->allow.begin(), m->allow.end(), uint8_t(1));

    BlockDims dims{cfg_.d, cfg_.heads, cfg_.ff_dim()};
    for (int i = 0; i < cfg_.vis_layers; ++i)
        x = transformer_block(g, ps_, "enc.vis.b" + std::to_string(i),
                              x, m, dims);
    return x;
}

Ref MmEncoder::connect_mlp(Graph& g, Ref vis) {
    Ref h = g.silu(linear(g, ps_, "enc.conn.m1", vis));
    return linear(g, ps_, "enc.conn.m2", h);
}

Ref MmEncoder::distill_queries(Graph& g, Ref vis, const std::vector<int>& owner,
                               Ref text, const std::vector<uint8_t>& text_mask, int B) {
    const int N = int(owner.size());
    const int T = cfg_.t_max;
    const int K = cfg_.n_query;
    const int P = cfg_.patches_per_image();
    const int Tq = K + T;
    ARGEN_CHECK(int(text_mask.size()) == B * T, ShapeError,
                "distill_queries: text mask size mismatch");

    // Query-side sequence per image: the K learned queries, then the owning
    // sample's text rows. Built with one gather over [queries ++ text rows].
    Ref base = g.concat_rows({g.param(*ps_.find("enc.conn.queries")), text});
    std::vector<int> sel(size_t(N) * Tq);
    for (int n = 0; n < N; ++n)
        for (int i = 0; i < Tq; ++i)
            sel[size_t(n) * Tq + i] = i < K ? i : K + owner[size_t(n)] * T + (i - K);
    Ref x = g.gather_rows(base, sel);

    auto self_m = std::make_shared<AttnMask>(N, Tq);
    for (int n = 0; n < N; ++n) {
        const int b = owner[size_t(n)];
        for (int i = 0; i < Tq; ++i)
            for (int j = 0; j < Tq; ++j) {
                auto real = [&](int r) {
                    return r < K || text_mask[size_t(b) * T + (r - K)] != 0;
                };
                self_m->set(n, i, j, (real(i) && real(j)) || i == j);
            }
    }
    auto cross_m = std::make_shared<CrossMask>(N, Tq, P);
    std::fill(cross_m->allow.begin(), cross_m->allow.end(), uint8_t(1));

    BlockDims dims{cfg_.d, cfg_.heads, cfg_.ff_dim()};
    for (int i = 0; i < cfg_.query_layers; ++i)
        x = cross_block(g, ps_, "enc.conn.b" + std::to_string(i),
                        x, vis, self_m, cross_m, dims);

    std::vector<int> emit(size_t(N) * K);
    for (int n = 0; n < N; ++n)
        for (int k = 0; k < K; ++k) emit[size_t(n) * K + k] = n * Tq + k;
    return g.gather_rows(x, emit);
}

EncodedContext MmEncoder::encode_context(Graph& g, const Vocab& v,
                                         const std::vector<CondSample>& batch, Ref pixels) {
    const int B = int(batch.size());
    const int T = cfg_.t_max;
    const int R = rows_per_image();
    ARGEN_CHECK(B > 0, ShapeError, "encode_context: empty batch");

    EncodedContext ctx;
    ctx.B = B;
    ctx.text_rows = T;
    ctx.rows_per_image = R;

    std::vector<int> ids(size_t(B) * T);
    std::vector<uint8_t> mask(size_t(B) * T);
    std::vector<Image> images;
    std::vector<int> owner;
    for (int b = 0; b < B; ++b) {
        const auto& s = batch[size_t(b)];
        if (int(s.images.size()) > cfg_.max_images)
            throw CapacityError("encode_context: sample brings " +
                                std::to_string(s.images.size()) + " images, budget is " +
                                std::to_string(cfg_.max_images));
        auto enc = v.encode(s.text, T);
        ctx.truncated = ctx.truncated || enc.truncated;
        std::copy(enc.ids.begin(), enc.ids.end(), ids.begin() + size_t(b) * T);
        std::copy(enc.mask.begin(), enc.mask.end(), mask.begin() + size_t(b) * T);
        ctx.images_per_sample.push_back(int(s.images.size()));
        for (const auto& img : s.images) {
            images.push_back(img);
            owner.push_back(b);
        }
    }
    const int N = int(images.size());
    ctx.slots = N == 0 ? 0 : *std::max_element(ctx.images_per_sample.begin(),
                                               ctx.images_per_sample.end());
    const int M = T + ctx.slots * R;
    ctx.M = M;

    if (N > 0 && !pixels.valid()) pixels = g.input(images_to_batch(images, 0, images.size()));
    if (N > 0)
        ARGEN_CHECK(pixels.val().shape_is({N, 3, cfg_.image_size, cfg_.image_size}), ShapeError,
                    "encode_context: pixel stack shape mismatch");

    Ref text = embed_text(g, ids, mask, B);

    Ref rows = text;
    if (N > 0) {
        Ref vis = embed_image(g, pixels, N);
        Ref conn = cfg_.connector == "mlp" ? connect_mlp(g, vis)
                                           : distill_queries(g, vis, owner, text, mask, B);
        Ref zero = g.input(Tensor::zeros({1, cfg_.d}));
        Ref all = g.concat_rows({text, conn, zero});

        std::vector<int> img_base(size_t(B) + 1, 0);
        for (int b = 0; b < B; ++b)
            img_base[size_t(b) + 1] = img_base[size_t(b)] + ctx.images_per_sample[size_t(b)];

        const int zero_row = B * T + N * R;
        std::vector<int> sel(size_t(B) * M);
        for (int b = 0; b < B; ++b)
            for (int m = 0; m < M; ++m) {
                int src;
                if (m < T) {
                    src = b * T + m;
                } else {
                    int slot = (m - T) / R, off = (m - T) % R;
                    src = slot < ctx.images_per_sample[size_t(b)]
                              ? B * T + (img_base[size_t(b)] + slot) * R + off
                              : zero_row;
                }
                sel[size_t(b) * M + m] = src;
            }
        rows = g.gather_rows(all, sel);
    }

    // Modality embedding on every row, image-index embedding on image rows.
    std::vector<int> mod_ids(size_t(B) * M);
    ctx.valid.assign(size_t(B) * M, 0);
    ctx.segment.assign(size_t(B) * M, 0);
    std::vector<int> img_rows;      // positions of live image rows in B*M
    std::vector<int> img_slot_ids;  // their slot indices
    for (int b = 0; b < B; ++b)
        for (int m = 0; m < M; ++m) {
            const size_t r = size_t(b) * M + m;
            if (m < T) {
                mod_ids[r] = 0;
                ctx.segment[r] = 0;
                ctx.valid[r] = mask[size_t(b) * T + m];
            } else {
                int slot = (m - T) / R;
                mod_ids[r] = 1;
                ctx.segment[r] = 1 + slot;
                if (slot < ctx.images_per_sample[size_t(b)]) {
                    ctx.valid[r] = 1;
                    img_rows.push_back(int(r));
                    img_slot_ids.push_back(slot);
                }
            }
        }

    Ref h = g.add(rows, g.embedding(g.param(*ps_.find("enc.ctx.mod")), mod_ids));
    if (!img_rows.empty()) {
        Ref idx_emb = g.embedding(g.param(*ps_.find("enc.ctx.imgidx")), img_slot_ids);
        Ref zero = g.input(Tensor::zeros({1, cfg_.d}));
        Ref padded = g.concat_rows({zero, idx_emb});
        std::vector<int> back(size_t(B) * M, 0);
        for (size_t i = 0; i < img_rows.size(); ++i) back[size_t(img_rows[i])] = int(i) + 1;
        h = g.add(h, g.gather_rows(padded, back));
    }
    ctx.h = h;
    return ctx;
}

Ref pooled_rows(Graph& g, Ref x, int B, int rows_per, const std::vector<uint8_t>* mask) {
    Tensor w = Tensor::zeros({B, B * rows_per});
    for (int b = 0; b < B; ++b) {
        int live = 0;
        if (mask)
            for (int t = 0; t < rows_per; ++t) live += (*mask)[size_t(b) * rows_per + t] ? 1 : 0;
        const float inv = 1.0f / float(live > 0 ? live : rows_per);
        for (int t = 0; t < rows_per; ++t) {
            bool on = !mask || live == 0 || (*mask)[size_t(b) * rows_per + t];
            if (on) w[int64_t(b) * (int64_t(B) * rows_per) + int64_t(b) * rows_per + t] = inv;
        }
    }
    return g.matmul(g.input(std::move(w)), x);
}

} // namespace argen
