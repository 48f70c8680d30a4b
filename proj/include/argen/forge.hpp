#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "argen/image.hpp"
#include "argen/rng.hpp"
#include "argen/scene.hpp"

namespace argen {

struct TaskSample {
    std::string id;
    std::string task;  // t2i | recon | seg | recover | subject | multi
    std::vector<std::string> cond_images;  // store-relative paths
    std::string text;
    std::string target_image;
    std::string split;  // train | val | test
    uint64_t seed = 0;
    std::string provenance;  // JSON: scenes + distortion params + coin flips
};

// Content-addressed PNG store: identical pixels share one file.
class ImageStore {
public:
    explicit ImageStore(std::string root);
    std::string put(const Image& img);  // returns store-relative path
    Image get(const std::string& rel_path) const;
    const std::string& root() const { return root_; }

private:
    std::string root_;
};

struct Manifest {
    std::vector<TaskSample> records;

    void save(const std::string& path) const;
    static Manifest load(const std::string& path);
    uint64_t content_hash() const;
    Manifest filter_task(const std::string& task) const;
    Manifest filter_split(const std::string& split) const;
};

// Task constructors. Each derives every random choice from the given rng.
TaskSample make_t2i(const Scene& scene, Rng& rng, ImageStore& store);
TaskSample make_recon(const Scene& scene, Rng& rng, ImageStore& store);
TaskSample make_seg(const Scene& scene, Rng& rng, ImageStore& store);
TaskSample make_recover(const Scene& scene, Rng& rng, ImageStore& store);
// Returns forward and reversed samples for one subject pair.
std::pair<TaskSample, TaskSample> make_subject(const Scene& scene_a, Rng& rng, ImageStore& store);
TaskSample make_multi(const Scene& scene, Rng& rng, ImageStore& store);

// Renders the target image a record's provenance describes (bit-exact).
Image rerender_target(const TaskSample& sample);
Image rerender_condition(const TaskSample& sample, int idx);

struct MixSpec {
    std::vector<std::pair<std::string, int>> ratios;
};
MixSpec stage_ratios(int stage);  // stage 1: t2i:recon:seg; stage 2: t2i:seg:recover:subject

// Proportional apportionment: floor shares, then leftover seats to the
// largest fractional remainders (ties to the earlier entry).
std::vector<int> largest_remainder(const std::vector<int>& weights, int total);

// drop_task removes one task and re-normalizes the rest to the same total.
Manifest mix_stage(int stage, int total_n, uint64_t seed, ImageStore& store,
                   const std::string& drop_task = "");

// Held-out evaluation set: equal parts recon/seg/recover/subject, split=test.
Manifest mix_eval(int total_n, uint64_t seed, ImageStore& store);

}  // namespace argen
