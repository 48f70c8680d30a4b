#include "argen/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <unordered_map>

#include "argen/error.hpp"
#include "json.hpp"

namespace argen {

namespace {

constexpr int kGrayClass = kNumColors;  // pixel class after the 8 palette slots
constexpr int kArea = 20;
constexpr double kMinConf = 0.3;

int classify_pixel(const uint8_t* p) {
    auto d2 = [&](const Rgb& c) {
        int dr = int(p[0]) - c.r, dg = int(p[1]) - c.g, db = int(p[2]) - c.b;
        return dr * dr + dg * dg + db * db;
    };
    int best = 0, bd = d2(kPalette[0]);
    for (int i = 1; i < kNumColors; ++i) {
        int d = d2(kPalette[i]);
        if (d < bd) {
            bd = d;
            best = i;
        }
    }
    if (d2(kNeutralGray) < bd) best = kGrayClass;
    return best;
}

// Rendered template masks for every (cell, shape, size, rotation).
const Mask& template_mask(int cell, int shape, int size, int rot_idx) {
    static const std::vector<Mask> bank = [] {
        std::vector<Mask> b;
        b.reserve(size_t(kNumCells) * kNumShapes * kNumSizes * kNumRots);
        for (int cell = 0; cell < kNumCells; ++cell)
            for (int shape = 0; shape < kNumShapes; ++shape)
                for (int size = 0; size < kNumSizes; ++size)
                    for (int r = 0; r < kNumRots; ++r) {
                        Image tmp(kImageSize, kImageSize);
                        Mask m(size_t(kImageSize) * kImageSize, 0);
                        FreeObject f{shape, kPalette[0], cell_cx(cell), cell_cy(cell),
                                     size_radius(size), double(kRotations[r])};
                        draw_object(tmp, f, &m);
                        b.push_back(std::move(m));
                    }
        return b;
    }();
    size_t i = ((size_t(cell) * kNumShapes + shape) * kNumSizes + size) * kNumRots + rot_idx;
    return bank[i];
}

double mask_iou(const Mask& a, const Mask& b) {
    int64_t inter = 0, uni = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        inter += a[i] && b[i];
        uni += a[i] || b[i];
    }
    return uni > 0 ? double(inter) / double(uni) : 0.0;
}

int centroid_cell(const Mask& m) {
    double sx = 0, sy = 0;
    int64_t n = 0;
    for (int y = 0; y < kImageSize; ++y)
        for (int x = 0; x < kImageSize; ++x)
            if (m[size_t(y) * kImageSize + x]) {
                sx += x;
                sy += y;
                ++n;
            }
    double third = double(kImageSize) / 3.0;
    int col = std::clamp(int(sx / double(n) / third), 0, 2);
    int row = std::clamp(int(sy / double(n) / third), 0, 2);
    return row * 3 + col;
}

}  // namespace

Scene SceneDetection::as_scene() const {
    Scene s;
    s.background = background >= 0 ? background : 0;
    for (const auto& o : objects) s.objects.push_back({o.shape, o.color, o.cell, o.size, o.rot_deg});
    return s;
}

bool SceneDetection::has_subject(int shape, int color) const {
    for (const auto& o : objects)
        if (o.shape == shape && o.color == color) return true;
    return false;
}

SceneDetection detect_scene(const Image& img) {
    ARGEN_CHECK(img.w == kImageSize && img.h == kImageSize, ShapeError,
                "detect_scene: expected a 64x64 image");
    const int N = kImageSize * kImageSize;
    std::vector<int> cls(size_t(N), 0);
    std::vector<int64_t> freq(size_t(kGrayClass) + 1, 0);
    for (int y = 0; y < kImageSize; ++y)
        for (int x = 0; x < kImageSize; ++x) {
            int c = classify_pixel(img.at(x, y));
            cls[size_t(y) * kImageSize + x] = c;
            ++freq[size_t(c)];
        }
    int bg = 0;
    for (int c = 1; c <= kGrayClass; ++c)
        if (freq[size_t(c)] > freq[size_t(bg)]) bg = c;

    SceneDetection det;
    det.background = bg == kGrayClass ? -1 : bg;

    std::vector<uint8_t> seen(size_t(N), 0);
    std::vector<int> stack;
    for (int start = 0; start < N; ++start) {
        if (seen[size_t(start)] || cls[size_t(start)] == bg) continue;
        int c = cls[size_t(start)];
        Mask comp(size_t(N), 0);
        int64_t area = 0;
        stack.assign(1, start);
        seen[size_t(start)] = 1;
        while (!stack.empty()) {
            int p = stack.back();
            stack.pop_back();
            comp[size_t(p)] = 1;
            ++area;
            int x = p % kImageSize, y = p / kImageSize;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    int nx = x + dx, ny = y + dy;
                    if (nx < 0 || nx >= kImageSize || ny < 0 || ny >= kImageSize) continue;
                    int q = ny * kImageSize + nx;
                    if (seen[size_t(q)] || cls[size_t(q)] != c) continue;
                    seen[size_t(q)] = 1;
                    stack.push_back(q);
                }
        }
        if (area < kArea) continue;
        if (c == kGrayClass) {  // gray blob on a colored ground: not an object
            det.degraded = true;
            continue;
        }
        DetObject o;
        o.color = c;
        o.cell = centroid_cell(comp);
        double best = -1.0;
        for (int shape = 0; shape < kNumShapes; ++shape)
            for (int size = 0; size < kNumSizes; ++size)
                for (int r = 0; r < kNumRots; ++r) {
                    double iou = mask_iou(comp, template_mask(o.cell, shape, size, r));
                    if (iou > best) {
                        best = iou;
                        o.shape = shape;
                        o.size = size;
                        o.rot_deg = kRotations[r];
                    }
                }
        o.conf = best;
        o.mask = std::move(comp);
        if (best < kMinConf) {
            det.degraded = true;
            continue;
        }
        det.objects.push_back(std::move(o));
    }
    if (det.objects.empty()) det.degraded = true;
    std::sort(det.objects.begin(), det.objects.end(),
              [](const DetObject& a, const DetObject& b) { return a.cell < b.cell; });
    return det;
}

bool detection_matches(const SceneDetection& det, const Scene& scene) {
    if (det.background != scene.background) return false;
    if (det.objects.size() != scene.objects.size()) return false;
    SceneRender r = render_scene(scene);
    for (size_t i = 0; i < scene.objects.size(); ++i) {
        const SceneObject& w = scene.objects[i];
        const DetObject& d = det.objects[i];
        if (d.shape != w.shape || d.color != w.color || d.cell != w.cell || d.size != w.size)
            return false;
        if (d.mask != r.masks[i]) return false;
    }
    return true;
}

namespace {

Tensor decode_block(VqTokenizer& tok, const std::vector<int>& tokens) {
    return tok.tok_decode(tokens);  // [B,3,S,S]
}

Image block_image(const Tensor& block, int i) {
    const int S = block.size(2);
    Tensor one({3, S, S});
    std::memcpy(one.data(), block.data() + int64_t(i) * 3 * S * S,
                sizeof(float) * size_t(3) * S * S);
    return tensor_to_image(one);
}

}  // namespace

std::vector<Image> eval_generate(GenModel* m, VqTokenizer& tok, const Manifest& subset,
                                 const ImageStore& store, const EvalOpts& opts) {
    const int n = int(subset.records.size());
    const int L = tok.seq_len();
    std::vector<Image> out;
    out.reserve(size_t(n));

    if (!opts.oracle.empty()) {
        ARGEN_CHECK(opts.oracle == "copier" || opts.oracle == "target" || opts.oracle == "random",
                    ConfigError, "eval: unknown oracle '" + opts.oracle + "'");
        Rng root(opts.seed);
        for (int i = 0; i < n; ++i) {
            const TaskSample& r = subset.records[size_t(i)];
            std::vector<int> tokens;
            if (opts.oracle == "random") {
                Rng rr = root.derive(0xAB, uint64_t(i));
                for (int t = 0; t < L; ++t)
                    tokens.push_back(rr.rand_int(tok.config().codebook_size));
            } else {
                std::string path;
                if (opts.oracle == "copier") {
                    ARGEN_CHECK(!r.cond_images.empty(), DataError,
                                "eval: copier oracle needs a condition image (" + r.id + ")");
                    path = r.cond_images[0];
                } else {
                    path = r.target_image;
                }
                std::vector<Image> one{store.get(path)};
                tokens = tok.encode_tokens(images_to_batch(one, 0, 1));
            }
            out.push_back(block_image(decode_block(tok, tokens), 0));
        }
    } else {
        ARGEN_CHECK(m != nullptr, ConfigError, "eval: model required when no oracle is set");
        CfgConfig cc;
        cc.guidance = opts.lambda;
        cc.sampler = opts.sampler;
        cc.temperature = opts.temperature;
        cc.top_k = opts.top_k;
        for (int b0 = 0; b0 < n; b0 += opts.batch) {
            const int nb = std::min(opts.batch, n - b0);
            std::vector<CondSample> conds;
            for (int i = 0; i < nb; ++i) {
                const TaskSample& r = subset.records[size_t(b0 + i)];
                CondSample c;
                c.text = r.text;
                for (const auto& p : r.cond_images) c.images.push_back(store.get(p));
                conds.push_back(std::move(c));
            }
            Graph g;
            EncodedContext ctx = m->enc.encode_context(g, m->vocab, conds);
            cc.seed = Rng(opts.seed).derive(0xBA7C4, uint64_t(b0)).next_u64();
            std::vector<int> tokens = m->dec.sample(SampleContext::from(ctx), cc);
            Tensor block = decode_block(tok, tokens);
            for (int i = 0; i < nb; ++i) out.push_back(block_image(block, i));
        }
    }

    if (!opts.dump_dir.empty()) {
        std::filesystem::create_directories(opts.dump_dir);
        for (int i = 0; i < n; ++i)
            write_png(opts.dump_dir + "/" + subset.records[size_t(i)].id + ".png",
                      out[size_t(i)]);
    }
    return out;
}

double MetricSeries::mean() const {
    double s = 0.0;
    for (double v : values) s += v;
    return values.empty() ? 0.0 : s / double(values.size());
}

MetricSeries recon_l2(GenModel* m, VqTokenizer& tok, const Manifest& manifest,
                      const ImageStore& store, const EvalOpts& opts) {
    Manifest sub = manifest.filter_task("recon");
    ARGEN_CHECK(!sub.records.empty(), DataError, "recon_l2: no recon records");
    std::vector<Image> gen = eval_generate(m, tok, sub, store, opts);
    MetricSeries out;
    for (size_t i = 0; i < sub.records.size(); ++i) {
        Tensor want = image_to_tensor(store.get(sub.records[i].target_image));
        out.ids.push_back(sub.records[i].id);
        out.values.push_back(image_rms(image_to_tensor(gen[i]), want));
    }
    return out;
}

namespace {

Mask foreground(const Image& img) {
    Mask m(size_t(img.w) * img.h, 0);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            m[size_t(y) * img.w + x] = classify_pixel(img.at(x, y)) != kGrayClass;
    return m;
}

}  // namespace

MetricSeries seg_iou(GenModel* m, VqTokenizer& tok, const Manifest& manifest,
                     const ImageStore& store, const EvalOpts& opts) {
    Manifest sub = manifest.filter_task("seg");
    ARGEN_CHECK(!sub.records.empty(), DataError, "seg_iou: no seg records");
    std::vector<Image> gen = eval_generate(m, tok, sub, store, opts);
    MetricSeries out;
    for (size_t i = 0; i < sub.records.size(); ++i) {
        Mask want = foreground(store.get(sub.records[i].target_image));
        out.ids.push_back(sub.records[i].id);
        out.values.push_back(mask_iou(foreground(gen[i]), want));
    }
    return out;
}

namespace {

int name_index(const char* const* names, int n, const std::string& w) {
    for (int i = 0; i < n; ++i)
        if (w == names[i]) return i;
    throw DataError("eval: unknown word '" + w + "'");
}

struct SubjectPrompt {
    int shape = 0, color = 0;
    Scene want;
};

SubjectPrompt parse_subject_text(const std::string& text) {
    size_t cut = text.find(". ");
    ARGEN_CHECK(cut != std::string::npos, DataError, "eval: subject text lacks a label sentence");
    std::istringstream is(text.substr(0, cut));
    std::string the, color, shape;
    is >> the >> color >> shape;
    ARGEN_CHECK(the == "the" && !shape.empty(), DataError, "eval: malformed subject label");
    SubjectPrompt p;
    p.color = name_index(kColorNames, kNumColors, color);
    p.shape = name_index(kShapeNames, kNumShapes, shape);
    p.want = parse_caption(text.substr(cut + 2));
    return p;
}

using Quad = std::array<int, 4>;

std::vector<Quad> object_quads(const std::vector<DetObject>& objs, int skip) {
    std::vector<Quad> q;
    for (int i = 0; i < int(objs.size()); ++i)
        if (i != skip) q.push_back({objs[i].shape, objs[i].color, objs[i].cell, objs[i].size});
    std::sort(q.begin(), q.end());
    return q;
}

}  // namespace

CpPfTerms cp_pf_terms(const Image& gen, const std::string& subject_text) {
    SubjectPrompt p = parse_subject_text(subject_text);
    const SceneObject* want_subj = nullptr;
    for (const auto& o : p.want.objects)
        if (o.shape == p.shape && o.color == p.color) want_subj = &o;
    ARGEN_CHECK(want_subj != nullptr, DataError, "cp_pf: target caption lacks the subject");

    SceneDetection det = detect_scene(gen);
    CpPfTerms t;
    t.cp = det.has_subject(p.shape, p.color) ? 1.0 : 0.0;
    t.bg = det.background == p.want.background ? 1.0 : 0.0;

    // Whatever sits at the subject's instructed cell carries the cell/size
    // terms, identity aside.
    int at_cell = -1;
    for (int k = 0; k < int(det.objects.size()); ++k) {
        const DetObject& o = det.objects[size_t(k)];
        if (o.cell != want_subj->cell) continue;
        if (at_cell < 0 || o.conf > det.objects[size_t(at_cell)].conf) at_cell = k;
    }
    t.cell = at_cell >= 0 ? 1.0 : 0.0;
    t.size = at_cell >= 0 && det.objects[size_t(at_cell)].size == want_subj->size ? 1.0 : 0.0;

    std::vector<Quad> want_rest;
    for (const auto& o : p.want.objects)
        if (&o != want_subj) want_rest.push_back({o.shape, o.color, o.cell, o.size});
    std::sort(want_rest.begin(), want_rest.end());
    t.distractors = object_quads(det.objects, at_cell) == want_rest ? 1.0 : 0.0;
    return t;
}

CpPfResult cp_pf(GenModel* m, VqTokenizer& tok, const Manifest& manifest,
                 const ImageStore& store, const EvalOpts& opts) {
    Manifest sub = manifest.filter_task("subject");
    ARGEN_CHECK(!sub.records.empty(), DataError, "cp_pf: no subject records");
    std::vector<Image> gen = eval_generate(m, tok, sub, store, opts);

    CpPfResult out;
    for (size_t i = 0; i < sub.records.size(); ++i) {
        CpPfTerms t = cp_pf_terms(gen[i], sub.records[i].text);
        out.cp.ids.push_back(sub.records[i].id);
        out.cp.values.push_back(t.cp);
        out.pf.ids.push_back(sub.records[i].id);
        out.pf.values.push_back(t.pf());
    }
    out.cp_mean = out.cp.mean();
    out.pf_mean = out.pf.mean();
    out.cp_times_pf = out.cp_mean * out.pf_mean;
    out.pf_zero = out.pf_mean == 0.0;
    out.cp_over_pf = out.pf_zero ? 0.0 : out.cp_mean / out.pf_mean;
    return out;
}

double copy_paste_value(const Image& gen, const Image& cond, const Image& target) {
    Tensor g = image_to_tensor(gen);
    double sim_c = 1.0 - image_rms(g, image_to_tensor(cond));
    double sim_t = 1.0 - image_rms(g, image_to_tensor(target));
    return std::max(0.0, sim_c - sim_t);
}

MetricSeries copy_paste_score(GenModel* m, VqTokenizer& tok, const Manifest& manifest,
                              const ImageStore& store, const EvalOpts& opts) {
    Manifest sub;
    for (const auto& r : manifest.records)
        if (r.task == "subject" || r.task == "recover") sub.records.push_back(r);
    ARGEN_CHECK(!sub.records.empty(), DataError, "copy_paste: no subject/recover records");
    std::vector<Image> gen = eval_generate(m, tok, sub, store, opts);
    MetricSeries out;
    for (size_t i = 0; i < sub.records.size(); ++i) {
        const TaskSample& r = sub.records[i];
        ARGEN_CHECK(!r.cond_images.empty(), DataError,
                    "copy_paste: record lacks a condition image (" + r.id + ")");
        out.ids.push_back(r.id);
        out.values.push_back(
            copy_paste_value(gen[i], store.get(r.cond_images[0]), store.get(r.target_image)));
    }
    return out;
}

EvalReport evaluate(GenModel* m, VqTokenizer& tok, const Manifest& manifest,
                    const ImageStore& store, const EvalOpts& opts,
                    const std::vector<std::string>& metrics) {
    Manifest test = manifest.filter_split("test");
    const Manifest& use = test.records.empty() ? manifest : test;

    std::vector<std::string> want = metrics;
    if (want.empty()) want = {"recon_l2", "seg_iou", "cp_pf", "copy_paste"};

    EvalReport rep;
    rep.variant = opts.variant;
    rep.seed = opts.seed;
    rep.ckpt_hash = opts.ckpt_hash;
    rep.manifest_hash = manifest.content_hash();
    rep.lambda = opts.lambda;
    for (const auto& mt : want) {
        if (mt == "recon_l2") {
            rep.recon_s = recon_l2(m, tok, use, store, opts);
            rep.recon = rep.recon_s.mean();
        } else if (mt == "seg_iou") {
            rep.iou_s = seg_iou(m, tok, use, store, opts);
            rep.iou = rep.iou_s.mean();
        } else if (mt == "cp_pf") {
            CpPfResult r = cp_pf(m, tok, use, store, opts);
            rep.cp_s = r.cp;
            rep.pf_s = r.pf;
            rep.cp = r.cp_mean;
            rep.pf = r.pf_mean;
            rep.cp_times_pf = r.cp_times_pf;
            rep.cp_over_pf = r.cp_over_pf;
            rep.pf_zero = r.pf_zero;
        } else if (mt == "copy_paste") {
            rep.cpp_s = copy_paste_score(m, tok, use, store, opts);
            rep.copy_paste = rep.cpp_s.mean();
        } else {
            throw ConfigError("eval: unknown metric '" + mt + "'");
        }
    }
    return rep;
}

namespace {

using nlohmann::json;

void dump_series(std::ostream& os, const std::string& metric, const MetricSeries& s) {
    if (s.values.empty()) return;
    for (size_t i = 0; i < s.values.size(); ++i)
        os << json{{"kind", "sample"}, {"metric", metric}, {"id", s.ids[i]},
                   {"value", s.values[i]}}
           << "\n";
    os << json{{"kind", "summary"}, {"metric", metric}, {"mean", s.mean()}, {"n", s.n()}} << "\n";
}

void load_series(const json& j, MetricSeries& s) {
    s.ids.push_back(j.at("id").get<std::string>());
    s.values.push_back(j.at("value").get<double>());
}

}  // namespace

void EvalReport::save(const std::string& path) const {
    std::ofstream os(path);
    ARGEN_CHECK(os.good(), DataError, "cannot write report '" + path + "'");
    os << json{{"kind", "meta"},       {"variant", variant},
               {"seed", seed},         {"ckpt_hash", ckpt_hash},
               {"manifest_hash", manifest_hash}, {"lambda", lambda},
               {"pf_zero", pf_zero},   {"cp_times_pf", cp_times_pf},
               {"cp_over_pf", cp_over_pf}}
       << "\n";
    dump_series(os, "recon_l2", recon_s);
    dump_series(os, "seg_iou", iou_s);
    dump_series(os, "cp", cp_s);
    dump_series(os, "pf", pf_s);
    dump_series(os, "copy_paste", cpp_s);
}

EvalReport EvalReport::load(const std::string& path) {
    std::ifstream is(path);
    ARGEN_CHECK(is.good(), DataError, "cannot read report '" + path + "'");
    EvalReport rep;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        std::string kind = j.at("kind").get<std::string>();
        if (kind == "meta") {
            rep.variant = j.at("variant").get<std::string>();
            rep.seed = j.at("seed").get<uint64_t>();
            rep.ckpt_hash = j.at("ckpt_hash").get<uint64_t>();
            rep.manifest_hash = j.at("manifest_hash").get<uint64_t>();
            rep.lambda = j.at("lambda").get<float>();
            rep.pf_zero = j.at("pf_zero").get<bool>();
            rep.cp_times_pf = j.at("cp_times_pf").get<double>();
            rep.cp_over_pf = j.at("cp_over_pf").get<double>();
        } else if (kind == "sample") {
            std::string mt = j.at("metric").get<std::string>();
            if (mt == "recon_l2") load_series(j, rep.recon_s);
            else if (mt == "seg_iou") load_series(j, rep.iou_s);
            else if (mt == "cp") load_series(j, rep.cp_s);
            else if (mt == "pf") load_series(j, rep.pf_s);
            else if (mt == "copy_paste") load_series(j, rep.cpp_s);
        }
    }
    if (!rep.recon_s.values.empty()) rep.recon = rep.recon_s.mean();
    if (!rep.iou_s.values.empty()) rep.iou = rep.iou_s.mean();
    if (!rep.cp_s.values.empty()) rep.cp = rep.cp_s.mean();
    if (!rep.pf_s.values.empty()) rep.pf = rep.pf_s.mean();
    if (!rep.cpp_s.values.empty()) rep.copy_paste = rep.cpp_s.mean();
    return rep;
}

std::string EvalReport::table() const {
    std::ostringstream os;
    os << "variant " << (variant.empty() ? "?" : variant) << "  seed " << seed << "  lambda "
       << lambda << "\n";
    auto row = [&](const char* name, double v, size_t n) {
        if (v < 0) return;
        os << "  " << std::left << std::setw(12) << name << std::right << std::fixed
           << std::setprecision(4) << v << "  (n=" << n << ")\n";
    };
    row("recon_l2", recon, recon_s.n());
    row("seg_iou", iou, iou_s.n());
    row("cp", cp, cp_s.n());
    row("pf", pf, pf_s.n());
    row("cp*pf", cp_times_pf, cp_s.n());
    row("cp/pf", cp_over_pf, cp_s.n());
    row("copy_paste", copy_paste, cpp_s.n());
    if (pf_zero) os << "  (pf is zero; cp/pf reported as 0)\n";
    return os.str();
}

namespace {

const MetricSeries* series_for(const EvalReport& r, const std::string& metric) {
    if (metric == "cp") return &r.cp_s;
    if (metric == "pf") return &r.pf_s;
    if (metric == "copy_paste") return &r.cpp_s;
    if (metric == "recon_l2") return &r.recon_s;
    if (metric == "seg_iou") return &r.iou_s;
    return nullptr;
}

}  // namespace

AblationComparison compare_ablations(const std::vector<EvalReport>& reports, uint64_t boot_seed,
                                     int boot_n) {
    const EvalReport* full = nullptr;
    for (const auto& r : reports)
        if (r.variant == "full") full = &r;
    ARGEN_CHECK(full != nullptr, DataError, "compare_ablations: no 'full' report");

    static const struct {
        const char* variant;
        const char* metric;
        int sign;
    } kDirs[] = {
        {"no_recovery", "cp", +1},      {"no_recovery", "pf", -1},
        {"no_stage1", "cp", -1},        {"no_stage1_seg", "copy_paste", +1},
        {"no_seg_stage2", "cp", -1},    {"no_subject", "cp", -1},
    };

    AblationComparison out;
    out.all_pass = true;
    for (const auto& dir : kDirs) {
        const EvalReport* var = nullptr;
        for (const auto& r : reports)
            if (r.variant == dir.variant) var = &r;
        if (!var) continue;

        const MetricSeries* vs = series_for(*var, dir.metric);
        const MetricSeries* fs = series_for(*full, dir.metric);
        std::unordered_map<std::string, double> fmap;
        for (size_t i = 0; i < fs->values.size(); ++i) fmap[fs->ids[i]] = fs->values[i];
        std::vector<double> diff;
        for (size_t i = 0; i < vs->values.size(); ++i) {
            auto it = fmap.find(vs->ids[i]);
            if (it != fmap.end()) diff.push_back(vs->values[i] - it->second);
        }
        ARGEN_CHECK(!diff.empty(), DataError,
                    std::string("compare_ablations: no paired samples for ") + dir.variant +
                        "/" + dir.metric);

        Direction d;
        d.variant = dir.variant;
        d.metric = dir.metric;
        d.sign = dir.sign;
        d.n = int(diff.size());
        double s = 0.0;
        for (double v : diff) s += v;
        d.delta = s / double(diff.size());

        std::vector<double> boots(size_t(boot_n), 0.0);
        Rng br = Rng(boot_seed).derive(fnv1a64(dir.variant, std::strlen(dir.variant)),
                                       fnv1a64(dir.metric, std::strlen(dir.metric)));
        for (int b = 0; b < boot_n; ++b) {
            double bs = 0.0;
            for (size_t k = 0; k < diff.size(); ++k)
                bs += diff[size_t(br.rand_int(int(diff.size())))];
            boots[size_t(b)] = bs / double(diff.size());
        }
        std::sort(boots.begin(), boots.end());
        d.lo = boots[size_t(std::floor(0.05 * (boot_n - 1)))];
        d.hi = boots[size_t(std::ceil(0.95 * (boot_n - 1)))];
        d.pass = dir.sign > 0 ? d.lo > 0.0 : d.hi < 0.0;
        out.all_pass = out.all_pass && d.pass;
        out.rows.push_back(std::move(d));
    }
    ARGEN_CHECK(!out.rows.empty(), DataError, "compare_ablations: no ablation reports given");
    return out;
}

std::string AblationComparison::table() const {
    std::ostringstream os;
    os << std::left << std::setw(16) << "variant" << std::setw(12) << "metric" << std::setw(6)
       << "want" << std::setw(10) << "delta" << std::setw(22) << "boot 90% interval"
       << "verdict\n";
    for (const auto& d : rows) {
        std::ostringstream ci;
        ci << std::fixed << std::setprecision(4) << "[" << d.lo << ", " << d.hi << "]";
        os << std::left << std::setw(16) << d.variant << std::setw(12) << d.metric
           << std::setw(6) << (d.sign > 0 ? "up" : "down") << std::setw(10) << std::fixed
           << std::setprecision(4) << d.delta << std::setw(22) << ci.str()
           << (d.pass ? "pass" : "FAIL") << "  (n=" << d.n << ")\n";
    }
    os << (all_pass ? "all directions pass\n" : "some directions FAIL\n");
    return os.str();
}

}  // namespace argen
