#pragma once

// Closed-world scoring. A pixel-level detector recovers scenes from images
// (never from provenance); on top of it sit reconstruction distance,
// segmentation IoU, concept-preservation / prompt-following proxies for
// subject-driven generation, a copy-paste score, and the directional
// comparison across ablation variants with paired bootstrap intervals.

#include <string>
#include <vector>

#include "argen/forge.hpp"
#include "argen/scene.hpp"
#include "argen/tokenizer.hpp"
#include "argen/trainer.hpp"

namespace argen {

struct DetObject {
    int shape = 0, color = 0, cell = 0, size = 0, rot_deg = 0;
    double conf = 0.0;  // best template IoU
    Mask mask;          // component pixels, full-image size
};

struct SceneDetection {
    int background = -1;  // palette index, or -1 when the ground is neutral gray
    std::vector<DetObject> objects;  // sorted by cell
    bool degraded = false;           // nothing detected, or a low-confidence blob

    Scene as_scene() const;  // background clamped to 0 when gray/unknown
    bool has_subject(int shape, int color) const;
};

// Nearest-palette classification per pixel, 8-connected same-color components
// (area >= 20) classified against rendered shape templates at the component's
// grid cell. 8-connectivity keeps thin rotated corners attached; distinct
// objects stay separated by the grid geometry.
SceneDetection detect_scene(const Image& img);

// Calibration contract: detection recovers background, every object's
// (shape, color, cell, size), and each object's exact pixel mask. Rotation
// must match wherever masks can distinguish it (mask equality enforces that).
bool detection_matches(const SceneDetection& det, const Scene& scene);

struct EvalOpts {
    float lambda = 3.0f;
    std::string sampler = "greedy";
    float temperature = 1.0f;
    int top_k = 32;
    uint64_t seed = 0;
    int batch = 16;         // sampling batch size
    std::string oracle;     // "" = model | "copier" | "target" | "random"
    std::string dump_dir;   // save generated PNGs here when non-empty
    std::string variant;    // recorded in the report
    uint64_t ckpt_hash = 0;
};

// Generates one image per manifest record: model sampling by default, or an
// oracle baseline (copier re-emits the first condition's token grid, target
// re-emits the target's token grid, random draws uniform tokens). Records
// are processed in manifest order.
std::vector<Image> eval_generate(GenModel* m, VqTokenizer& tok, const Manifest& subset,
                                 const ImageStore& store, const EvalOpts& opts);

struct MetricSeries {
    std::vector<std::string> ids;
    std::vector<double> values;
    double mean() const;
    size_t n() const { return values.size(); }
};

// Mean per-pixel RMS distance in [0,1] space over the manifest's recon task.
MetricSeries recon_l2(GenModel* m, VqTokenizer& tok, const Manifest& manifest,
                      const ImageStore& store, const EvalOpts& opts);

// IoU of the generated foreground (pixels not classified neutral gray)
// against the target's foreground, over the seg task.
MetricSeries seg_iou(GenModel* m, VqTokenizer& tok, const Manifest& manifest,
                     const ImageStore& store, const EvalOpts& opts);

// Concept preservation: subject (shape,color) detected in the generation.
// Prompt following: fraction of {background, subject cell, subject size,
// distractor set} satisfied against the parsed target caption. Identity and
// instruction are split: the cell/size terms judge whichever object occupies
// the subject's target cell, so a wrong-colored subject in the right spot
// still follows the prompt (CP 0, PF 1).
struct CpPfTerms {
    double cp = 0.0, bg = 0.0, cell = 0.0, size = 0.0, distractors = 0.0;
    double pf() const { return (bg + cell + size + distractors) / 4.0; }
};

// Scores one generated image against a subject-task prompt of the form
// "the {color} {shape}. {target caption}".
CpPfTerms cp_pf_terms(const Image& gen, const std::string& subject_text);

struct CpPfResult {
    MetricSeries cp, pf;
    double cp_mean = 0.0, pf_mean = 0.0, cp_times_pf = 0.0, cp_over_pf = 0.0;
    bool pf_zero = false;  // PF mean is 0; the ratio is reported as 0 + flag
};
CpPfResult cp_pf(GenModel* m, VqTokenizer& tok, const Manifest& manifest,
                 const ImageStore& store, const EvalOpts& opts);

// max(0, sim(gen, condition) - sim(gen, target)) with sim = 1 - rms, over
// subject and recover tasks: high when outputs track the condition image
// instead of the instructed target.
double copy_paste_value(const Image& gen, const Image& cond, const Image& target);
MetricSeries copy_paste_score(GenModel* m, VqTokenizer& tok, const Manifest& manifest,
                              const ImageStore& store, const EvalOpts& opts);

struct EvalReport {
    std::string variant;
    uint64_t seed = 0;
    uint64_t ckpt_hash = 0;
    uint64_t manifest_hash = 0;
    float lambda = 3.0f;
    // Means; -1 marks a metric that was not computed.
    double recon = -1.0, iou = -1.0, cp = -1.0, pf = -1.0;
    double cp_times_pf = -1.0, cp_over_pf = -1.0, copy_paste = -1.0;
    bool pf_zero = false;
    MetricSeries recon_s, iou_s, cp_s, pf_s, cpp_s;

    void save(const std::string& path) const;  // line-delimited JSON records
    static EvalReport load(const std::string& path);
    std::string table() const;  // human-readable summary
};

// Runs the requested metrics ("recon_l2", "seg_iou", "cp_pf", "copy_paste";
// empty list = all) over the manifest's test split.
EvalReport evaluate(GenModel* m, VqTokenizer& tok, const Manifest& manifest,
                    const ImageStore& store, const EvalOpts& opts,
                    const std::vector<std::string>& metrics = {});

// One expected effect direction of an ablation against the full recipe.
struct Direction {
    std::string variant, metric;
    int sign = 0;  // expected sign of (variant - full)
    double delta = 0.0, lo = 0.0, hi = 0.0;  // paired bootstrap 90% interval
    int n = 0;
    bool pass = false;
};

struct AblationComparison {
    std::vector<Direction> rows;
    bool all_pass = false;
    std::string table() const;
};

// Checks the expected sign pattern: no_recovery CP up / PF down, no_stage1
// CP down, no_stage1_seg copy-paste up, no_seg_stage2 and no_subject CP
// down. Pass requires the paired bootstrap 90% interval to exclude zero on
// the expected side. Reports are paired sample-by-sample against the "full"
// report (matching ids required).
AblationComparison compare_ablations(const std::vector<EvalReport>& reports,
                                     uint64_t boot_seed = 0, int boot_n = 2000);

}  // namespace argen
