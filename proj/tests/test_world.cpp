#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>

#include <filesystem>
#include <map>
#include <set>

#include "argen/forge.hpp"
#include "argen/image.hpp"
#include "argen/scene.hpp"
#include "argen/vocab.hpp"

using namespace argen;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fresh_dir(const char* name) {
    fs::path p = fs::path("world_test_tmp") / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p.string();
}

Mask object_mask(int shape, int size, int rot) {
    Image img(kImageSize, kImageSize);
    Mask m(size_t(kImageSize) * kImageSize, 0);
    FreeObject f{shape, kPalette[0], cell_cx(4), cell_cy(4), size_radius(size), double(rot)};
    draw_object(img, f, &m);
    return m;
}

}  // namespace

TEST_CASE("render is deterministic and survives png round trip") {
    Rng rng(11);
    for (int i = 0; i < 20; ++i) {
        Scene s = gen_scene(rng);
        SceneRender a = render_scene(s);
        SceneRender b = render_scene(s);
        CHECK(a.image == b.image);
        CHECK(a.masks == b.masks);

        std::string dir = fresh_dir("png");
        std::string path = dir + "/img.png";
        write_png(path, a.image);
        Image back = read_png(path);
        CHECK(back == a.image);
    }
}

TEST_CASE("masks are disjoint, sized, and match drawn pixels") {
    Rng rng(12);
    for (int i = 0; i < 50; ++i) {
        Scene s = gen_scene(rng);
        SceneRender r = render_scene(s);
        REQUIRE(r.masks.size() == s.objects.size());
        std::vector<int> owner(size_t(kImageSize) * kImageSize, -1);
        for (size_t k = 0; k < r.masks.size(); ++k) {
            int area = 0;
            for (size_t p = 0; p < r.masks[k].size(); ++p) {
                if (!r.masks[k][p]) continue;
                CHECK(owner[p] == -1);
                owner[p] = int(k);
                ++area;
            }
            CHECK(area >= 20);
        }
        for (int y = 0; y < kImageSize; ++y)
            for (int x = 0; x < kImageSize; ++x) {
                const uint8_t* px = r.image.at(x, y);
                int k = owner[size_t(y) * kImageSize + x];
                Rgb want = k < 0 ? kPalette[s.background] : kPalette[s.objects[size_t(k)].color];
                CHECK(px[0] == want.r);
                CHECK(px[1] == want.g);
                CHECK(px[2] == want.b);
            }
    }
}

TEST_CASE("rotation mask equivalence classes per shape") {
    // circle, ring: rotation never changes the mask
    // square, cross: 0 and 90 coincide, 45 differs
    // triangle: all three rotations distinct
    for (int size = 0; size < kNumSizes; ++size) {
        auto m = [&](int shape, int rot) { return object_mask(shape, size, rot); };
        for (int shape : {0, 3}) {  // circle, ring
            CHECK(m(shape, 0) == m(shape, 45));
            CHECK(m(shape, 0) == m(shape, 90));
        }
        for (int shape : {1, 4}) {  // square, cross
            CHECK(m(shape, 0) == m(shape, 90));
            CHECK(m(shape, 0) != m(shape, 45));
        }
        CHECK(m(2, 0) != m(2, 45));  // triangle
        CHECK(m(2, 0) != m(2, 90));
        CHECK(m(2, 45) != m(2, 90));
    }
}

TEST_CASE("distinct shape and size pairs give distinct masks") {
    std::map<Mask, std::pair<int, int>> seen;
    for (int shape = 0; shape < kNumShapes; ++shape)
        for (int size = 0; size < kNumSizes; ++size) {
            Mask m = object_mask(shape, size, 0);
            auto [it, fresh] = seen.insert({m, {shape, size}});
            if (!fresh)
                MESSAGE("collision: shape " << shape << " size " << size << " vs shape "
                                            << it->second.first << " size " << it->second.second);
            CHECK(fresh);
        }
}

TEST_CASE("caption inverts back to the scene") {
    Rng rng(13);
    for (int i = 0; i < 300; ++i) {
        Scene s = gen_scene(rng);
        Scene back = parse_caption(caption(s));
        Scene want = s;
        for (auto& o : want.objects) o.rot_deg = 0;
        CHECK(back == want);
    }
    CHECK_THROWS_AS(parse_caption("a small red blob at top left on a blue background"),
                    DataError);
    CHECK_THROWS_AS(parse_caption("a small red circle on a blue background"), DataError);
}

TEST_CASE("scene serialization round trips and ids are stable") {
    Rng rng(14);
    std::set<uint64_t> ids;
    for (int i = 0; i < 200; ++i) {
        Scene s = gen_scene(rng);
        CHECK(scene_from_string(scene_to_string(s)) == s);
        CHECK(scene_id(s) == scene_id(scene_from_string(scene_to_string(s))));
        ids.insert(scene_id(s));
    }
    CHECK(ids.size() == 200);  // no collisions across 200 random scenes
}

TEST_CASE("generated scenes satisfy the world invariants") {
    Rng rng(15);
    std::set<int> shapes_seen, colors_seen, counts_seen;
    for (int i = 0; i < 500; ++i) {
        Scene s = gen_scene(rng);
        REQUIRE(s.objects.size() >= 1);
        REQUIRE(s.objects.size() <= 3);
        counts_seen.insert(int(s.objects.size()));
        std::set<int> cells;
        std::set<std::pair<int, int>> pairs;
        for (const auto& o : s.objects) {
            CHECK(o.color != s.background);
            CHECK(cells.insert(o.cell).second);
            CHECK(pairs.insert({o.shape, o.color}).second);
            shapes_seen.insert(o.shape);
            colors_seen.insert(o.color);
        }
        for (size_t k = 1; k < s.objects.size(); ++k)
            CHECK(s.objects[k - 1].cell < s.objects[k].cell);
    }
    CHECK(shapes_seen.size() == size_t(kNumShapes));
    CHECK(colors_seen.size() == size_t(kNumColors));
    CHECK(counts_seen.size() == 3);
}

TEST_CASE("vocabulary encodes every caption without truncation") {
    Vocab v;
    Rng rng(16);
    for (int i = 0; i < 300; ++i) {
        Scene s = gen_scene(rng);
        std::string text = caption(s);
        auto enc = v.encode(text, 40);
        CHECK(!enc.truncated);
        CHECK(enc.ids.size() == 40);
        CHECK(enc.ids[0] == Vocab::kBos);
        CHECK(v.decode(enc.ids) == text);

        const auto& o = s.objects[0];
        std::string subj = subject_label(o.shape, o.color) + " . " + text;
        auto enc2 = v.encode(subj, 40);
        CHECK(!enc2.truncated);
        CHECK(v.decode(enc2.ids) == subj);
    }
    auto empty = v.encode("", 8);
    CHECK(empty.ids == std::vector<int>(8, Vocab::kPad));
    CHECK(empty.mask == std::vector<uint8_t>(8, 0));
    CHECK_THROWS_AS(v.id("sphere"), DataError);

    std::string dir = fresh_dir("vocab");
    v.save(dir + "/vocab.txt");
    Vocab w = Vocab::load(dir + "/vocab.txt");
    CHECK(w.size() == v.size());
    for (int i = 0; i < v.size(); ++i) CHECK(w.word(i) == v.word(i));
}

TEST_CASE("image store deduplicates identical images") {
    ImageStore store(fresh_dir("store"));
    Rng rng(17);
    Scene s = gen_scene(rng);
    Image img = render_scene(s).image;
    std::string p1 = store.put(img);
    std::string p2 = store.put(img);
    CHECK(p1 == p2);
    CHECK(store.get(p1) == img);
    Image other(kImageSize, kImageSize);
    CHECK(store.put(other) != p1);
}

TEST_CASE("task constructors build the advertised records") {
    ImageStore store(fresh_dir("tasks"));
    Rng rng(18);

    SUBCASE("t2i") {
        Scene s = gen_scene(rng);
        TaskSample t = make_t2i(s, rng, store);
        CHECK(t.cond_images.empty());
        CHECK(t.text == caption(s));
        CHECK(store.get(t.target_image) == render_scene(s).image);
        CHECK(rerender_target(t) == render_scene(s).image);
    }

    SUBCASE("recon condition equals target") {
        bool saw_cap = false, saw_plain = false;
        for (int i = 0; i < 30; ++i) {
            Scene s = gen_scene(rng);
            TaskSample t = make_recon(s, rng, store);
            REQUIRE(t.cond_images.size() == 1);
            CHECK(t.cond_images[0] == t.target_image);
            if (t.text.empty())
                saw_plain = true;
            else {
                CHECK(t.text == caption(s));
                saw_cap = true;
            }
            CHECK(rerender_condition(t, 0) == store.get(t.cond_images[0]));
        }
        CHECK(saw_cap);
        CHECK(saw_plain);
    }

    SUBCASE("seg isolates one object on neutral gray") {
        for (int i = 0; i < 20; ++i) {
            Scene s = gen_scene(rng);
            TaskSample t = make_seg(s, rng, store);
            int k = json::parse(t.provenance).at("obj").get<int>();
            const auto& o = s.objects.at(size_t(k));
            CHECK(t.text == "segment " + subject_label(o.shape, o.color));
            SceneRender full = render_scene(s);
            Image seg = store.get(t.target_image);
            for (int y = 0; y < kImageSize; ++y)
                for (int x = 0; x < kImageSize; ++x) {
                    const uint8_t* px = seg.at(x, y);
                    bool inside = full.masks[size_t(k)][size_t(y) * kImageSize + x];
                    Rgb want = inside ? kPalette[o.color] : kNeutralGray;
                    REQUIRE(px[0] == want.r);
                    REQUIRE(px[1] == want.g);
                    REQUIRE(px[2] == want.b);
                }
            CHECK(rerender_target(t) == seg);
        }
    }

    SUBCASE("subject pair shares the subject and mirrors images") {
        for (int i = 0; i < 20; ++i) {
            Scene a = gen_scene(rng);
            auto [fwd, rev] = make_subject(a, rng, store);
            CHECK(fwd.cond_images[0] == rev.target_image);
            CHECK(fwd.target_image == rev.cond_images[0]);
            json pf = json::parse(fwd.provenance);
            int sh = pf.at("subj")[0].get<int>();
            int co = pf.at("subj")[1].get<int>();
            Scene b = scene_from_string(pf.at("scene").get<std::string>());
            CHECK(scene_from_string(pf.at("ref").get<std::string>()) == a);
            auto has_subject = [&](const Scene& s) {
                for (const auto& o : s.objects)
                    if (o.shape == sh && o.color == co) return true;
                return false;
            };
            CHECK(has_subject(a));
            CHECK(has_subject(b));
            CHECK(b.background != co);
            std::string prefix = subject_label(sh, co) + " . ";
            CHECK(fwd.text == prefix + caption(b));
            CHECK(rev.text == prefix + caption(a));
            CHECK(rerender_target(fwd) == store.get(fwd.target_image));
            CHECK(rerender_condition(fwd, 0) == store.get(fwd.cond_images[0]));
        }
    }

    SUBCASE("recover distorts the condition but keeps the target clean") {
        int differs = 0;
        for (int i = 0; i < 20; ++i) {
            Scene s = gen_scene(rng);
            TaskSample t = make_recover(s, rng, store);
            CHECK(t.text == caption(s));
            Image cond = store.get(t.cond_images[0]);
            Image target = store.get(t.target_image);
            CHECK(target == render_scene(s).image);
            if (!(cond == target)) ++differs;
            CHECK(rerender_condition(t, 0) == cond);
            CHECK(rerender_target(t) == target);
        }
        CHECK(differs == 20);
    }

    SUBCASE("recover with distortions zeroed reduces to the clean render") {
        Scene s = gen_scene(rng);
        TaskSample t = make_recover(s, rng, store);
        json prov = json::parse(t.provenance);
        prov["bg"] = {{"kind", "flat"}, {"c0", s.background}};
        for (size_t k = 0; k < s.objects.size(); ++k) {
            prov["objs"][k]["rot"] = 0.0;
            prov["objs"][k]["scale"] = 1.0;
            prov["objs"][k]["cell"] = s.objects[k].cell;
        }
        t.provenance = prov.dump();
        CHECK(rerender_condition(t, 0) == render_scene(s).image);
    }

    SUBCASE("multi takes one isolated view per object") {
        for (int tries = 0; tries < 20; ++tries) {
            Scene s = gen_scene(rng);
            if (s.objects.size() < 2) continue;
            TaskSample t = make_multi(s, rng, store);
            REQUIRE(t.cond_images.size() == s.objects.size());
            for (size_t k = 0; k < s.objects.size(); ++k)
                CHECK(rerender_condition(t, int(k)) == store.get(t.cond_images[k]));
            CHECK(t.text == caption(s));
        }
        Scene one;
        one.background = 0;
        one.objects.push_back({0, 1, 4, 1, 0});
        CHECK_THROWS_AS(make_multi(one, rng, store), DataError);
    }
}

TEST_CASE("largest remainder apportionment matches its defining properties") {
    CHECK(largest_remainder({700, 180, 1600}, 100) == std::vector<int>{28, 7, 65});
    CHECK(largest_remainder({700, 180, 1600}, 200) == std::vector<int>{56, 15, 129});
    CHECK(largest_remainder({1, 1, 1, 1}, 10) == std::vector<int>{3, 3, 2, 2});

    Rng rng(19);
    for (int trial = 0; trial < 200; ++trial) {
        int n = 2 + rng.rand_int(6);
        std::vector<int> w(static_cast<size_t>(n));
        int64_t W = 0;
        for (auto& x : w) {
            x = rng.rand_int(50);
            W += x;
        }
        if (W == 0) w[0] = 1, W = 1;
        int total = 1 + rng.rand_int(500);
        auto counts = largest_remainder(w, total);
        int sum = 0;
        for (int c : counts) sum += c;
        CHECK(sum == total);
        // every count is floor or floor+1 of the exact share, and any entry
        // holding an extra unit has remainder >= (ties: index <) than any
        // entry that does not
        std::vector<int64_t> fl(static_cast<size_t>(n)), rem(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) {
            fl[size_t(i)] = int64_t(total) * w[size_t(i)] / W;
            rem[size_t(i)] = int64_t(total) * w[size_t(i)] % W;
        }
        for (int i = 0; i < n; ++i) {
            REQUIRE(counts[size_t(i)] >= fl[size_t(i)]);
            REQUIRE(counts[size_t(i)] <= fl[size_t(i)] + 1);
        }
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                bool ei = counts[size_t(i)] == fl[size_t(i)] + 1;
                bool ej = counts[size_t(j)] == fl[size_t(j)] + 1;
                if (ei && !ej)
                    CHECK((rem[size_t(i)] > rem[size_t(j)] ||
                           (rem[size_t(i)] == rem[size_t(j)] && i < j)));
            }
    }
}

TEST_CASE("stage mixes honor ratios, splits, and provenance") {
    ImageStore store(fresh_dir("mix"));
    Manifest m = mix_stage(1, 200, 7, store);
    REQUIRE(int(m.records.size()) == 200);

    std::map<std::string, int> per_task;
    for (const auto& r : m.records) per_task[r.task] += 1;
    CHECK(per_task["t2i"] == 56);
    CHECK(per_task["recon"] == 15);
    CHECK(per_task["seg"] == 129);

    SUBCASE("scene ids are unique and split-consistent") {
        std::map<uint64_t, std::string> split_of_scene;
        std::set<uint64_t> primary;
        for (const auto& r : m.records) {
            json prov = json::parse(r.provenance);
            uint64_t sid = scene_id(scene_from_string(prov.at("scene").get<std::string>()));
            CHECK(primary.insert(sid).second);
            auto [it, fresh] = split_of_scene.insert({sid, r.split});
            if (!fresh) CHECK(it->second == r.split);
            if (prov.contains("ref")) {
                uint64_t rid = scene_id(scene_from_string(prov.at("ref").get<std::string>()));
                auto [it2, fresh2] = split_of_scene.insert({rid, r.split});
                if (!fresh2) CHECK(it2->second == r.split);
            }
        }
        std::map<std::string, int> per_split;
        for (const auto& r : m.records) per_split[r.split] += 1;
        CHECK(per_split["train"] > 150);
        CHECK(per_split["val"] + per_split["test"] > 0);
    }

    SUBCASE("every record re-renders bit-identically from provenance") {
        for (const auto& r : m.records) {
            CHECK(store.get(r.target_image) == rerender_target(r));
            for (size_t i = 0; i < r.cond_images.size(); ++i)
                CHECK(store.get(r.cond_images[i]) == rerender_condition(r, int(i)));
        }
    }

    SUBCASE("same seed reproduces the manifest, different seed does not") {
        ImageStore s2(fresh_dir("mix2"));
        Manifest m2 = mix_stage(1, 200, 7, s2);
        CHECK(m2.content_hash() == m.content_hash());
        ImageStore s3(fresh_dir("mix3"));
        Manifest m3 = mix_stage(1, 200, 8, s3);
        CHECK(m3.content_hash() != m.content_hash());
    }

    SUBCASE("manifest save and load round trips") {
        std::string path = store.root() + "/manifest.jsonl";
        m.save(path);
        Manifest back = Manifest::load(path);
        REQUIRE(back.records.size() == m.records.size());
        CHECK(back.content_hash() == m.content_hash());
        CHECK(back.filter_task("seg").records.size() == 129);
        size_t n_splits = back.filter_split("train").records.size() +
                          back.filter_split("val").records.size() +
                          back.filter_split("test").records.size();
        CHECK(n_splits == back.records.size());
    }
}

TEST_CASE("stage 2 mix includes subject pairs that share a split") {
    ImageStore store(fresh_dir("mix_s2"));
    Manifest m = mix_stage(2, 150, 21, store);
    REQUIRE(int(m.records.size()) == 150);
    std::map<std::string, int> per_task;
    for (const auto& r : m.records) per_task[r.task] += 1;
    auto counts = largest_remainder({600, 150, 150, 400}, 150);
    CHECK(per_task["t2i"] == counts[0]);
    CHECK(per_task["seg"] == counts[1]);
    CHECK(per_task["recover"] == counts[2]);
    CHECK(per_task["subject"] == counts[3]);

    // paired subject records (mirrored image paths) always land in one split
    std::map<std::string, std::string> split_by_target;
    for (const auto& r : m.records)
        if (r.task == "subject") split_by_target[r.target_image] = r.split;
    for (const auto& r : m.records) {
        if (r.task != "subject") continue;
        auto it = split_by_target.find(r.cond_images[0]);
        if (it != split_by_target.end()) CHECK(it->second == r.split);
    }
}

TEST_CASE("mix rejects tiny totals and unknown drops, honors task drops") {
    ImageStore store(fresh_dir("mix_drop"));
    CHECK_THROWS_AS(mix_stage(1, 50, 1, store), ConfigError);
    CHECK_THROWS_AS(mix_stage(1, 200, 1, store, "recover"), ConfigError);
    CHECK_THROWS_AS(mix_stage(3, 200, 1, store), ConfigError);

    Manifest m = mix_stage(2, 120, 3, store, "subject");
    std::map<std::string, int> per_task;
    for (const auto& r : m.records) per_task[r.task] += 1;
    CHECK(per_task.count("subject") == 0);
    auto counts = largest_remainder({600, 150, 150}, 120);
    CHECK(per_task["t2i"] == counts[0]);
    CHECK(per_task["seg"] == counts[1]);
    CHECK(per_task["recover"] == counts[2]);
}

TEST_CASE("eval mix is equal parts held-out tasks") {
    ImageStore store(fresh_dir("mix_eval"));
    Manifest m = mix_eval(40, 5, store);
    REQUIRE(int(m.records.size()) == 40);
    std::map<std::string, int> per_task;
    for (const auto& r : m.records) {
        per_task[r.task] += 1;
        CHECK(r.split == "test");
    }
    CHECK(per_task["recon"] == 10);
    CHECK(per_task["seg"] == 10);
    CHECK(per_task["recover"] == 10);
    CHECK(per_task["subject"] == 10);
}
