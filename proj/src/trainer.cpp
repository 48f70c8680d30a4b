#include "argen/trainer.hpp"

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <sstream>
#include <unordered_map>

#include "argen/error.hpp"
#include "argen/scene.hpp"

namespace argen {

namespace {

bool has_prefix(const std::string& s, const std::string& p) { return s.rfind(p, 0) == 0; }

double mean_of(const std::vector<double>& v, size_t i0, size_t i1) {
    double s = 0.0;
    for (size_t i = i0; i < i1; ++i) s += v[i];
    return i1 > i0 ? s / double(i1 - i0) : 0.0;
}

std::string plan_text(const StagePlan& p) {
    std::ostringstream os;
    os << "stage = " << p.stage << "\nepochs = " << p.epochs << "\nlr = " << p.lr
       << "\nwarmup_frac = " << p.warmup_frac << "\nclip = " << p.clip << "\nbatch = " << p.batch
       << "\ncfg_drop = " << p.cfg_drop << "\n";
    return os.str();
}

}  // namespace

GenModel::GenModel(EncoderConfig ec, DecoderConfig dc)
    : enc((ec.vocab_size = ec.vocab_size > 0 ? ec.vocab_size : Vocab().size(), ec)), dec(dc) {}

void GenModel::init(uint64_t seed) {
    Rng root(seed);
    Rng re = root.derive(0xE11C);
    Rng rd = root.derive(0xDEC0);
    enc.init(re);
    dec.init(rd);
}

void store_model(Checkpoint& ck, const GenModel& m) {
    store_params(ck, m.enc.params());
    store_params(ck, m.dec.params());
}

void load_model(const Checkpoint& ck, GenModel& m) {
    load_params(ck, m.enc.params());
    load_params(ck, m.dec.params());
}

StagePlan stage_plan(int stage) {
    ARGEN_CHECK(stage == 1 || stage == 2, ConfigError, "stage must be 1 or 2");
    StagePlan p;
    p.stage = stage;
    if (stage == 1) {
        p.epochs = 1;
        p.lr = 5e-4;
        p.freeze = {"enc."};
        p.thaw = {"enc.conn."};
    } else {
        p.epochs = 2;
        p.lr = 1e-4;
        p.freeze = {"enc.vis."};
    }
    return p;
}

std::vector<std::string> apply_freeze(GenModel& m, const StagePlan& plan) {
    std::vector<std::string> frozen;
    for (ParamStore* ps : m.stores()) {
        for (const auto& p : ps->all()) {
            bool frz = false;
            for (const auto& f : plan.freeze) frz = frz || has_prefix(p->name, f);
            for (const auto& t : plan.thaw) frz = frz && !has_prefix(p->name, t);
            p->trainable = !frz;
            if (frz) frozen.push_back(p->name);
        }
    }
    return frozen;
}

WarmupLog contrastive_warmup(GenModel& m, const WarmupConfig& cfg, std::ostream* log) {
    ARGEN_CHECK(cfg.steps >= 1 && cfg.batch >= 2, ConfigError,
                "warmup: need at least one step and batch >= 2");
    const EncoderConfig& ec = m.enc.config();
    const int B = cfg.batch, T = ec.t_max, P = ec.patches_per_image();

    for (const auto& p : m.enc.params().all())
        p->trainable = has_prefix(p->name, "enc.txt.") || has_prefix(p->name, "enc.vis.");
    for (const auto& p : m.dec.params().all()) p->trainable = false;

    std::vector<int> diag(static_cast<size_t>(B));
    for (int i = 0; i < B; ++i) diag[size_t(i)] = i;
    std::vector<float> ones(static_cast<size_t>(B), 1.0f);

    Adam opt;
    Rng root(cfg.seed);
    WarmupLog out;
    for (int step = 0; step < cfg.steps; ++step) {
        Rng sr = root.derive(0x5CE7E, uint64_t(step));
        std::vector<Image> imgs;
        std::vector<int> ids(static_cast<size_t>(B) * T);
        std::vector<uint8_t> mask(static_cast<size_t>(B) * T);
        for (int i = 0; i < B; ++i) {
            Scene sc = gen_scene(sr);
            imgs.push_back(render_scene(sc).image);
            auto e = m.vocab.encode(caption(sc), T);
            std::copy(e.ids.begin(), e.ids.end(), ids.begin() + int64_t(i) * T);
            std::copy(e.mask.begin(), e.mask.end(), mask.begin() + int64_t(i) * T);
        }

        Graph g;
        Ref pixels = g.input(images_to_batch(imgs, 0, imgs.size()));
        Ref vis = m.enc.embed_image(g, pixels, B);
        Ref vf = g.normalize_rows(pooled_rows(g, vis, B, P, nullptr));
        Ref text = m.enc.embed_text(g, ids, mask, B);
        Ref tf = g.normalize_rows(pooled_rows(g, text, B, T, &mask));
        Ref l_vt = g.cross_entropy(g.scale(g.matmul_nt(vf, tf), cfg.logit_scale), diag, ones, true);
        Ref l_tv = g.cross_entropy(g.scale(g.matmul_nt(tf, vf), cfg.logit_scale), diag, ones, true);
        Ref loss = g.weighted_sum({l_vt, l_tv}, {0.5f, 0.5f});

        double lv = double(loss.val()[0]);
        ARGEN_CHECK(std::isfinite(lv), NumericError,
                    "warmup: non-finite loss at step " + std::to_string(step));
        g.backward(loss);
        double lr = lr_schedule(step, cfg.steps, cfg.lr, 0.05);
        opt.step(m.enc.params(), lr, cfg.clip);
        out.loss.push_back(lv);
        if (log)
            *log << "{\"warm_step\":" << step << ",\"loss\":" << lv << ",\"lr\":" << lr << "}\n";
    }

    for (ParamStore* ps : m.stores())
        for (const auto& p : ps->all()) p->trainable = true;

    size_t k = std::min<size_t>(10, out.loss.size());
    out.initial = mean_of(out.loss, 0, k);
    out.final_loss = mean_of(out.loss, out.loss.size() - k, out.loss.size());
    return out;
}

namespace {

// Target token grids are pure functions of the target image; cache by path.
struct TokenCache {
    std::unordered_map<std::string, std::vector<int>> by_path;

    const std::vector<int>& get(VqTokenizer& tok, const ImageStore& store,
                                const std::string& path) {
        auto it = by_path.find(path);
        if (it != by_path.end()) return it->second;
        Image img = store.get(path);
        std::vector<Image> one{img};
        auto tokens = tok.encode_tokens(images_to_batch(one, 0, 1));
        return by_path.emplace(path, std::move(tokens)).first->second;
    }
};

std::string save_state(const GenModel& m, Adam& opt, const StagePlan& plan, uint64_t data_hash,
                       const StageOpts& opts, int epoch, int step_in_epoch, int64_t gstep) {
    if (opts.out_dir.empty()) return "";
    std::filesystem::create_directories(opts.out_dir);
    Checkpoint ck;
    store_model(ck, m);
    store_adam(ck, opt);
    ck.put_scalar("train.stage", uint64_t(plan.stage));
    ck.put_scalar("train.epoch", uint64_t(epoch));
    ck.put_scalar("train.step_in_epoch", uint64_t(step_in_epoch));
    ck.put_scalar("train.global_step", uint64_t(gstep));
    ck.put_scalar("train.seed", opts.seed);
    ck.put_scalar("data.hash", data_hash);
    ck.config_text = plan_text(plan);
    std::string name = opts.tag.empty() ? std::string("stage") + std::to_string(plan.stage)
                                        : opts.tag;
    std::string path = opts.out_dir + "/" + name + ".e" + std::to_string(epoch);
    if (step_in_epoch > 0) path += ".s" + std::to_string(step_in_epoch);
    path += ".ckpt";
    ck.save(path);
    return path;
}

}  // namespace

StageResult train_stage(GenModel& m, VqTokenizer& tok, const StagePlan& plan,
                        const Manifest& data, const ImageStore& store, const StageOpts& opts) {
    ARGEN_CHECK(plan.batch >= 1 && plan.epochs >= 1, ConfigError,
                "train_stage: batch and epochs must be positive");
    ARGEN_CHECK(m.dec.config().vocab == tok.config().codebook_size &&
                    m.dec.config().grid == tok.grid(),
                ConfigError, "train_stage: decoder token space must match the tokenizer");

    Manifest train = data.filter_split("train");
    const int n = int(train.records.size());
    ARGEN_CHECK(n > 0, DataError, "train_stage: manifest has no train records");
    const uint64_t data_hash = data.content_hash();
    const int L = m.dec.config().tokens();

    apply_freeze(m, plan);

    const int steps_per_epoch = (n + plan.batch - 1) / plan.batch;
    const int64_t total_steps = int64_t(steps_per_epoch) * plan.epochs;

    Adam opt;
    int e0 = 0, s0 = 0;
    int64_t gstep = 0;
    if (!opts.resume.empty()) {
        Checkpoint ck = Checkpoint::load(opts.resume);
        ARGEN_CHECK(ck.need_scalar("data.hash") == data_hash, DataError,
                    "train_stage: resume manifest hash mismatch");
        ARGEN_CHECK(int(ck.need_scalar("train.stage")) == plan.stage, ConfigError,
                    "train_stage: resume checkpoint is from a different stage");
        load_model(ck, m);
        load_adam(ck, opt);
        e0 = int(ck.need_scalar("train.epoch"));
        s0 = int(ck.need_scalar("train.step_in_epoch"));
        gstep = int64_t(ck.need_scalar("train.global_step"));
    }

    Rng root(opts.seed);
    TokenCache cache;
    std::vector<double> batch_losses;
    std::string last_good = opts.resume;

    StageResult res;
    for (int e = e0; e < plan.epochs; ++e) {
        std::vector<int> order(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) order[size_t(i)] = i;
        Rng order_rng = root.derive(0x0DE8 + uint64_t(plan.stage), uint64_t(e));
        order_rng.shuffle(order);

        for (int s = (e == e0 ? s0 : 0); s < steps_per_epoch; ++s) {
            const int b0 = s * plan.batch;
            const int nb = std::min(plan.batch, n - b0);

            std::map<std::string, std::vector<int>> groups;
            for (int i = 0; i < nb; ++i) {
                const TaskSample& r = train.records[size_t(order[size_t(b0 + i)])];
                groups[r.task].push_back(order[size_t(b0 + i)]);
            }

            Graph g;
            Rng drop_rng = root.derive(0xCF6 + uint64_t(plan.stage), uint64_t(gstep));
            std::vector<Ref> losses;
            std::vector<float> coeffs;
            std::vector<std::pair<std::string, double>> task_loss;
            for (const auto& [task, idxs] : groups) {
                std::vector<CondSample> conds;
                std::vector<int> targets;
                targets.reserve(idxs.size() * size_t(L));
                for (int idx : idxs) {
                    const TaskSample& r = train.records[size_t(idx)];
                    CondSample c;
                    c.text = r.text;
                    for (const auto& p : r.cond_images) c.images.push_back(store.get(p));
                    conds.push_back(std::move(c));
                    const auto& tk = cache.get(tok, store, r.target_image);
                    targets.insert(targets.end(), tk.begin(), tk.end());
                }
                EncodedContext ctx = m.enc.encode_context(g, m.vocab, conds);
                ctx = m.dec.cfg_dropout(g, ctx, plan.cfg_drop, drop_rng, nullptr);
                Ref lg = m.dec.teacher_forcing_loss(g, ctx, targets);
                task_loss.emplace_back(task, double(lg.val()[0]));
                losses.push_back(lg);
                coeffs.push_back(float(idxs.size()) / float(nb));
            }
            Ref loss = losses.size() == 1 ? losses[0] : g.weighted_sum(losses, coeffs);

            double lv = double(loss.val()[0]);
            if (!std::isfinite(lv))
                throw NumericError("train_stage: non-finite loss at step " +
                                   std::to_string(gstep) + "; last good checkpoint: " +
                                   (last_good.empty() ? "<none>" : last_good));
            g.backward(loss);
            double lr = lr_schedule(gstep, total_steps, plan.lr, plan.warmup_frac);
            opt.step(m.stores(), lr, plan.clip);

            if (opts.log)
                for (const auto& [task, tl] : task_loss)
                    *opts.log << "{\"step\":" << gstep << ",\"stage\":" << plan.stage
                              << ",\"epoch\":" << e << ",\"task\":\"" << task
                              << "\",\"loss\":" << tl << ",\"lr\":" << lr << "}\n";

            batch_losses.push_back(lv);
            ++gstep;
            if (opts.save_every > 0 && gstep % opts.save_every == 0 && s + 1 < steps_per_epoch) {
                std::string p = save_state(m, opt, plan, data_hash, opts, e, s + 1, gstep);
                if (!p.empty()) last_good = p;
            }
        }
        std::string p = save_state(m, opt, plan, data_hash, opts, e + 1, 0, gstep);
        if (!p.empty()) {
            last_good = p;
            res.ckpt_path = p;
        }
    }

    size_t k = std::min<size_t>(10, batch_losses.size());
    res.initial_loss = mean_of(batch_losses, 0, k);
    res.final_loss = mean_of(batch_losses, batch_losses.size() - k, batch_losses.size());
    res.steps = gstep;
    return res;
}

std::vector<std::string> ablation_names() {
    return {"full", "no_stage1", "no_stage1_seg", "no_recovery", "no_seg_stage2", "no_subject"};
}

AblationVariant ablation_variant(const std::string& name) {
    AblationVariant v;
    v.name = name;
    if (name == "full") return v;
    if (name == "no_stage1") {
        v.run_stage1 = false;
        return v;
    }
    if (name == "no_stage1_seg") {
        v.drop_stage1 = "seg";
        return v;
    }
    if (name == "no_recovery") {
        v.drop_stage2 = "recover";
        return v;
    }
    if (name == "no_seg_stage2") {
        v.drop_stage2 = "seg";
        return v;
    }
    if (name == "no_subject") {
        v.drop_stage2 = "subject";
        return v;
    }
    throw ConfigError("unknown ablation variant '" + name + "'");
}

RecipeResult run_recipe(GenModel& m, VqTokenizer& tok, const AblationVariant& var,
                        const RecipeConfig& cfg, ImageStore& store, const std::string& out_dir,
                        std::ostream* log) {
    RecipeResult out;
    m.init(cfg.seed);

    WarmupConfig w = cfg.warm;
    w.seed = cfg.seed;
    out.warm = contrastive_warmup(m, w, log);

    auto make_plan = [&](int stage) {
        StagePlan p = stage_plan(stage);
        p.batch = cfg.batch;
        p.clip = cfg.clip;
        p.warmup_frac = cfg.warmup_frac;
        p.cfg_drop = cfg.cfg_drop;
        p.lr = stage == 1 ? cfg.lr1 : cfg.lr2;
        p.epochs = stage == 1 ? cfg.epochs1 : cfg.epochs2;
        return p;
    };
    auto stage_opts = [&](int stage) {
        StageOpts o;
        o.seed = cfg.seed;
        o.out_dir = out_dir;
        o.tag = var.name + ".stage" + std::to_string(stage);
        o.save_every = cfg.save_every;
        o.log = log;
        return o;
    };

    if (var.run_stage1) {
        Manifest d1 = mix_stage(1, cfg.stage1_n, cfg.seed, store, var.drop_stage1);
        StagePlan p1 = make_plan(1);
        if (log)
            *log << "{\"event\":\"stage_start\",\"variant\":\"" << var.name
                 << "\",\"stage\":1,\"frozen\":" << apply_freeze(m, p1).size() << "}\n";
        out.stage1 = train_stage(m, tok, p1, d1, store, stage_opts(1));
        if (!out.stage1.ckpt_path.empty())
            out.stage1_hash = Checkpoint::load(out.stage1.ckpt_path).content_hash();
    }

    Manifest d2 = mix_stage(2, cfg.stage2_n, cfg.seed, store, var.drop_stage2);
    StagePlan p2 = make_plan(2);
    if (log) {
        auto frozen = apply_freeze(m, p2);
        *log << "{\"event\":\"stage_start\",\"variant\":\"" << var.name
             << "\",\"stage\":2,\"frozen\":" << frozen.size() << "}\n";
    }
    out.stage2 = train_stage(m, tok, p2, d2, store, stage_opts(2));

    if (!out_dir.empty()) {
        Checkpoint ck;
        store_model(ck, m);
        ck.put_scalar("recipe.seed", cfg.seed);
        ck.put_scalar("lineage.stage1", out.stage1_hash);
        ck.config_text = "variant = " + var.name + "\n";
        std::filesystem::create_directories(out_dir);
        out.ckpt_path = out_dir + "/" + var.name + ".final.ckpt";
        ck.save(out.ckpt_path);
    }
    return out;
}

}  // namespace argen
