#include "argen/forge.hpp"

#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "argen/error.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace argen {

ImageStore::ImageStore(std::string root) : root_(std::move(root)) {
    fs::create_directories(root_);
}

std::string ImageStore::put(const Image& img) {
    char buf[64];
    uint64_t h = img.content_hash();
    std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)h);
    std::string name(buf);
    std::string rel = "images/" + name.substr(0, 2) + "/" + name + ".png";
    fs::path full = fs::path(root_) / rel;
    if (!fs::exists(full)) {
        fs::create_directories(full.parent_path());
        write_png(full.string(), img);
    }
    return rel;
}

Image ImageStore::get(const std::string& rel_path) const {
    return read_png((fs::path(root_) / rel_path).string());
}

void Manifest::save(const std::string& path) const {
    fs::create_directories(fs::path(path).parent_path());
    std::ofstream f(path);
    ARGEN_CHECK(f.good(), DataError, "manifest: cannot write " + path);
    for (const auto& r : records) {
        json j;
        j["id"] = r.id;
        j["task"] = r.task;
        j["cond"] = r.cond_images;
        j["text"] = r.text;
        j["target"] = r.target_image;
        j["split"] = r.split;
        j["seed"] = r.seed;
        j["prov"] = json::parse(r.provenance);
        f << j.dump() << "\n";
    }
}

Manifest Manifest::load(const std::string& path) {
    std::ifstream f(path);
    ARGEN_CHECK(f.good(), DataError, "manifest: cannot read " + path);
    Manifest m;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        TaskSample r;
        r.id = j.at("id").get<std::string>();
        r.task = j.at("task").get<std::string>();
        r.cond_images = j.at("cond").get<std::vector<std::string>>();
        r.text = j.at("text").get<std::string>();
        r.target_image = j.at("target").get<std::string>();
        r.split = j.at("split").get<std::string>();
        r.seed = j.at("seed").get<uint64_t>();
        r.provenance = j.at("prov").dump();
        m.records.push_back(std::move(r));
    }
    return m;
}

uint64_t Manifest::content_hash() const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& r : records) {
        json j;
        j["id"] = r.id;
        j["task"] = r.task;
        j["cond"] = r.cond_images;
        j["text"] = r.text;
        j["target"] = r.target_image;
        j["split"] = r.split;
        j["seed"] = r.seed;
        j["prov"] = json::parse(r.provenance);
        std::string s = j.dump();
        h = fnv1a64(s.data(), s.size(), h);
    }
    return h;
}

Manifest Manifest::filter_task(const std::string& task) const {
    Manifest m;
    for (const auto& r : records)
        if (r.task == task) m.records.push_back(r);
    return m;
}

Manifest Manifest::filter_split(const std::string& split) const {
    Manifest m;
    for (const auto& r : records)
        if (r.split == split) m.records.push_back(r);
    return m;
}

// ---- task constructors ----

TaskSample make_t2i(const Scene& scene, Rng& rng, ImageStore& store) {
    (void)rng;
    TaskSample s;
    s.task = "t2i";
    s.text = caption(scene);
    s.target_image = store.put(render_scene(scene).image);
    s.provenance = json{{"scene", scene_to_string(scene)}}.dump();
    return s;
}

TaskSample make_recon(const Scene& scene, Rng& rng, ImageStore& store) {
    TaskSample s;
    s.task = "recon";
    bool with_caption = rng.uniform() < 0.5;
    std::string path = store.put(render_scene(scene).image);
    s.cond_images = {path};
    s.text = with_caption ? caption(scene) : std::string();
    s.target_image = path;
    s.provenance = json{{"scene", scene_to_string(scene)}, {"cap", with_caption}}.dump();
    return s;
}

namespace {

Image render_seg_target(const Scene& scene, int obj_index) {
    Image img(kImageSize, kImageSize);
    for (int y = 0; y < kImageSize; ++y)
        for (int x = 0; x < kImageSize; ++x)
            img.set(x, y, kNeutralGray.r, kNeutralGray.g, kNeutralGray.b);
    const SceneObject& o = scene.objects.at(size_t(obj_index));
    FreeObject f{o.shape, kPalette[o.color], cell_cx(o.cell), cell_cy(o.cell),
                 size_radius(o.size), double(o.rot_deg)};
    draw_object(img, f, nullptr);
    return img;
}

Image render_recover_condition(const Scene& scene, const json& prov) {
    Image img(kImageSize, kImageSize);
    const json& bg = prov.at("bg");
    Rgb c0 = kPalette[bg.at("c0").get<int>()];
    if (bg.at("kind").get<std::string>() == "flat") {
        for (int y = 0; y < kImageSize; ++y)
            for (int x = 0; x < kImageSize; ++x) img.set(x, y, c0.r, c0.g, c0.b);
    } else {
        Rgb c1 = kPalette[bg.at("c1").get<int>()];
        int axis = bg.at("axis").get<int>();
        for (int y = 0; y < kImageSize; ++y)
            for (int x = 0; x < kImageSize; ++x) {
                double t = (axis == 0 ? x : y) / double(kImageSize - 1);
                img.set(x, y, uint8_t(std::lround(c0.r * (1 - t) + c1.r * t)),
                        uint8_t(std::lround(c0.g * (1 - t) + c1.g * t)),
                        uint8_t(std::lround(c0.b * (1 - t) + c1.b * t)));
            }
    }
    const json& objs = prov.at("objs");
    for (size_t i = 0; i < scene.objects.size(); ++i) {
        const SceneObject& o = scene.objects[i];
        const json& p = objs.at(i);
        FreeObject f{o.shape, kPalette[o.color], cell_cx(p.at("cell").get<int>()),
                     cell_cy(p.at("cell").get<int>()),
                     size_radius(o.size) * p.at("scale").get<double>(),
                     double(o.rot_deg) + p.at("rot").get<double>()};
        draw_object(img, f, nullptr);
    }
    return img;
}

}  // namespace

TaskSample make_seg(const Scene& scene, Rng& rng, ImageStore& store) {
    TaskSample s;
    s.task = "seg";
    int k = rng.rand_int(int(scene.objects.size()));
    const SceneObject& o = scene.objects[size_t(k)];
    s.cond_images = {store.put(render_scene(scene).image)};
    s.text = std::string("segment ") + subject_label(o.shape, o.color);
    s.target_image = store.put(render_seg_target(scene, k));
    s.provenance = json{{"scene", scene_to_string(scene)}, {"obj", k}}.dump();
    return s;
}

TaskSample make_recover(const Scene& scene, Rng& rng, ImageStore& store) {
    TaskSample s;
    s.task = "recover";
    json bg;
    if (rng.uniform() < 0.5) {
        bg = {{"kind", "flat"}, {"c0", rng.rand_int(kNumColors)}};
    } else {
        int c0 = rng.rand_int(kNumColors);
        int c1 = rng.rand_int(kNumColors - 1);
        if (c1 >= c0) ++c1;
        bg = {{"kind", "grad"}, {"c0", c0}, {"c1", c1}, {"axis", rng.rand_int(2)}};
    }
    std::vector<int> cells(kNumCells);
    for (int i = 0; i < kNumCells; ++i) cells[size_t(i)] = i;
    rng.shuffle(cells);
    json objs = json::array();
    for (size_t i = 0; i < scene.objects.size(); ++i) {
        double rot = rng.uniform() < 0.5 ? -45.0 : 45.0;
        double scale = 0.5 + rng.uniform();
        objs.push_back({{"rot", rot}, {"scale", scale}, {"cell", cells[i]}});
    }
    json prov{{"scene", scene_to_string(scene)}, {"bg", bg}, {"objs", objs}};
    s.cond_images = {store.put(render_recover_condition(scene, prov))};
    s.text = caption(scene);
    s.target_image = store.put(render_scene(scene).image);
    s.provenance = prov.dump();
    return s;
}

namespace {

// Fresh scene guaranteed to contain the subject (shape,color).
Scene make_partner_scene(int subj_shape, int subj_color, Rng& rng) {
    Scene s;
    do {
        s.background = rng.rand_int(kNumColors);
    } while (s.background == subj_color);
    int n = 1 + rng.rand_int(3);
    std::vector<int> cells(kNumCells);
    for (int i = 0; i < kNumCells; ++i) cells[size_t(i)] = i;
    rng.shuffle(cells);
    SceneObject subj;
    subj.shape = subj_shape;
    subj.color = subj_color;
    subj.cell = cells[0];
    subj.size = rng.rand_int(kNumSizes);
    subj.rot_deg = kRotations[rng.rand_int(kNumRots)];
    s.objects.push_back(subj);
    for (int i = 1; i < n; ++i) {
        SceneObject o;
        o.cell = cells[size_t(i)];
        for (;;) {
            o.shape = rng.rand_int(kNumShapes);
            o.color = rng.rand_int(kNumColors);
            if (o.color == s.background) continue;
            bool dup = false;
            for (const auto& prev : s.objects)
                dup = dup || (prev.shape == o.shape && prev.color == o.color);
            if (!dup) break;
        }
        o.size = rng.rand_int(kNumSizes);
        o.rot_deg = kRotations[rng.rand_int(kNumRots)];
        s.objects.push_back(o);
    }
    std::sort(s.objects.begin(), s.objects.end(),
              [](const SceneObject& a, const SceneObject& b) { return a.cell < b.cell; });
    return s;
}

TaskSample subject_sample(const Scene& ref, const Scene& target, int subj_shape, int subj_color,
                          const char* dir, ImageStore& store) {
    TaskSample s;
    s.task = "subject";
    s.cond_images = {store.put(render_scene(ref).image)};
    s.text = subject_label(subj_shape, subj_color) + " . " + caption(target);
    s.target_image = store.put(render_scene(target).image);
    s.provenance = json{{"scene", scene_to_string(target)},
                        {"ref", scene_to_string(ref)},
                        {"subj", {subj_shape, subj_color}},
                        {"dir", dir}}
                       .dump();
    return s;
}

}  // namespace

std::pair<TaskSample, TaskSample> make_subject(const Scene& scene_a, Rng& rng, ImageStore& store) {
    int k = rng.rand_int(int(scene_a.objects.size()));
    int subj_shape = scene_a.objects[size_t(k)].shape;
    int subj_color = scene_a.objects[size_t(k)].color;
    Scene scene_b = make_partner_scene(subj_shape, subj_color, rng);
    return {subject_sample(scene_a, scene_b, subj_shape, subj_color, "fwd", store),
            subject_sample(scene_b, scene_a, subj_shape, subj_color, "rev", store)};
}

TaskSample make_multi(const Scene& scene, Rng& rng, ImageStore& store) {
    (void)rng;
    ARGEN_CHECK(scene.objects.size() >= 2, DataError, "multi task needs at least 2 objects");
    TaskSample s;
    s.task = "multi";
    for (size_t i = 0; i < scene.objects.size(); ++i)
        s.cond_images.push_back(store.put(render_seg_target(scene, int(i))));
    s.text = caption(scene);
    s.target_image = store.put(render_scene(scene).image);
    s.provenance = json{{"scene", scene_to_string(scene)}}.dump();
    return s;
}

Image rerender_target(const TaskSample& sample) {
    json prov = json::parse(sample.provenance);
    Scene scene = scene_from_string(prov.at("scene").get<std::string>());
    if (sample.task == "seg") return render_seg_target(scene, prov.at("obj").get<int>());
    return render_scene(scene).image;
}

Image rerender_condition(const TaskSample& sample, int idx) {
    ARGEN_CHECK(idx >= 0 && size_t(idx) < sample.cond_images.size(), IndexError,
                "rerender_condition: no condition image " + std::to_string(idx));
    json prov = json::parse(sample.provenance);
    Scene scene = scene_from_string(prov.at("scene").get<std::string>());
    if (sample.task == "recon" || sample.task == "seg") return render_scene(scene).image;
    if (sample.task == "recover") return render_recover_condition(scene, prov);
    if (sample.task == "subject")
        return render_scene(scene_from_string(prov.at("ref").get<std::string>())).image;
    if (sample.task == "multi") return render_seg_target(scene, idx);
    throw DataError("rerender_condition: task '" + sample.task + "' has no conditions");
}

// ---- stage mixing ----

MixSpec stage_ratios(int stage) {
    if (stage == 1) return {{{"t2i", 700}, {"recon", 180}, {"seg", 1600}}};
    if (stage == 2) return {{{"t2i", 600}, {"seg", 150}, {"recover", 150}, {"subject", 400}}};
    throw ConfigError("stage must be 1 or 2");
}

std::vector<int> largest_remainder(const std::vector<int>& weights, int total) {
    ARGEN_CHECK(!weights.empty(), ConfigError, "largest_remainder: no weights");
    int64_t W = 0;
    for (int w : weights) {
        ARGEN_CHECK(w >= 0, ConfigError, "largest_remainder: negative weight");
        W += w;
    }
    ARGEN_CHECK(W > 0, ConfigError, "largest_remainder: zero total weight");
    std::vector<int> counts(weights.size());
    std::vector<std::pair<int64_t, size_t>> rems;
    int assigned = 0;
    for (size_t i = 0; i < weights.size(); ++i) {
        int64_t num = int64_t(total) * weights[i];
        counts[i] = int(num / W);
        assigned += counts[i];
        rems.push_back({num % W, i});
    }
    std::sort(rems.begin(), rems.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    for (int i = 0; i < total - assigned; ++i) counts[rems[size_t(i)].second] += 1;
    return counts;
}

namespace {

std::string split_of(uint64_t primary_scene_id) {
    uint64_t b = mix_u64(primary_scene_id, 0x73706c6974ull) % 100;
    if (b < 5) return "val";
    if (b < 10) return "test";
    return "train";
}

struct SceneDedup {
    std::set<uint64_t> used;
    Scene fresh(Rng& rng) {
        for (;;) {
            Scene s = gen_scene(rng);
            if (used.insert(scene_id(s)).second) return s;
        }
    }
};

Manifest mix_tasks(const MixSpec& spec, int total_n, uint64_t seed, uint64_t stage_tag,
                   ImageStore& store, const std::string& forced_split, const char* id_prefix) {
    std::vector<int> weights;
    for (const auto& [task, w] : spec.ratios) weights.push_back(w);
    std::vector<int> counts = largest_remainder(weights, total_n);

    Rng root(seed);
    SceneDedup dedup;
    Manifest m;
    int index = 0;
    for (size_t ti = 0; ti < spec.ratios.size(); ++ti) {
        const std::string& task = spec.ratios[ti].first;
        int want = counts[ti];
        int emitted = 0;
        while (emitted < want) {
            Rng rec = root.derive(stage_tag, uint64_t(index));
            uint64_t rec_seed = rec.state();
            std::vector<TaskSample> out;
            if (task == "t2i") {
                out.push_back(make_t2i(dedup.fresh(rec), rec, store));
            } else if (task == "recon") {
                out.push_back(make_recon(dedup.fresh(rec), rec, store));
            } else if (task == "seg") {
                out.push_back(make_seg(dedup.fresh(rec), rec, store));
            } else if (task == "recover") {
                out.push_back(make_recover(dedup.fresh(rec), rec, store));
            } else if (task == "subject") {
                Scene a = dedup.fresh(rec);
                // Partner scenes must also be globally unique; retry the pair
                // on a collision.
                Scene b;
                std::pair<TaskSample, TaskSample> pr;
                for (;;) {
                    pr = make_subject(a, rec, store);
                    b = scene_from_string(
                        nlohmann::json::parse(pr.first.provenance).at("scene").get<std::string>());
                    if (dedup.used.insert(scene_id(b)).second) break;
                }
                out.push_back(pr.first);
                if (emitted + 1 < want) out.push_back(pr.second);
            } else {
                throw ConfigError("unknown task in mix: " + task);
            }
            for (auto& r : out) {
                char idbuf[64];
                std::snprintf(idbuf, sizeof(idbuf), "%s-%06d", id_prefix, index);
                r.id = idbuf;
                r.seed = rec_seed;
                if (!forced_split.empty()) {
                    r.split = forced_split;
                } else {
                    json prov = json::parse(r.provenance);
                    uint64_t sid = scene_id(scene_from_string(prov.at("scene").get<std::string>()));
                    if (prov.contains("ref")) {
                        uint64_t rid =
                            scene_id(scene_from_string(prov.at("ref").get<std::string>()));
                        sid = std::min(sid, rid);
                    }
                    r.split = split_of(sid);
                }
                m.records.push_back(std::move(r));
                ++index;
                ++emitted;
            }
        }
    }
    Rng shuf = root.derive(0xF00Dull, stage_tag);
    shuf.shuffle(m.records);
    return m;
}

}  // namespace

Manifest mix_stage(int stage, int total_n, uint64_t seed, ImageStore& store,
                   const std::string& drop_task) {
    ARGEN_CHECK(total_n >= 100, ConfigError, "mix_stage: total_n must be >= 100");
    MixSpec spec = stage_ratios(stage);
    if (!drop_task.empty()) {
        auto before = spec.ratios.size();
        spec.ratios.erase(std::remove_if(spec.ratios.begin(), spec.ratios.end(),
                                         [&](const auto& p) { return p.first == drop_task; }),
                          spec.ratios.end());
        ARGEN_CHECK(spec.ratios.size() < before, ConfigError,
                    "mix_stage: task '" + drop_task + "' not in stage " + std::to_string(stage));
        ARGEN_CHECK(!spec.ratios.empty(), ConfigError, "mix_stage: all tasks dropped");
    }
    std::string prefix = "s" + std::to_string(stage);
    if (!drop_task.empty()) prefix += "-no-" + drop_task;
    return mix_tasks(spec, total_n, seed, uint64_t(stage), store, "", prefix.c_str());
}

Manifest mix_eval(int total_n, uint64_t seed, ImageStore& store) {
    ARGEN_CHECK(total_n >= 4, ConfigError, "mix_eval: total_n too small");
    MixSpec spec{{{"recon", 1}, {"seg", 1}, {"recover", 1}, {"subject", 1}}};
    return mix_tasks(spec, total_n, seed, 99, store, "test", "ev");
}

}  // namespace argen
