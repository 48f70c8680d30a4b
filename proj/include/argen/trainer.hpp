#pragma once

// Two-stage conditional-generator training. A short contrastive warm-up gives
// the text and vision towers aligned features (they have no pretrained
// initialization to load). Stage 1 then trains connector + decoder with the
// rest of the encoder frozen; stage 2 unfreezes everything except the vision
// tower and switches to the instruction task mix at a lower learning rate.

#include <ostream>
#include <string>
#include <vector>

#include "argen/checkpoint.hpp"
#include "argen/decoder.hpp"
#include "argen/encoder.hpp"
#include "argen/forge.hpp"
#include "argen/optim.hpp"
#include "argen/tokenizer.hpp"
#include "argen/vocab.hpp"

namespace argen {

// The conditional generator: text vocabulary, multimodal encoder, AR decoder.
// The image tokenizer trains separately and stays frozen here; it defines the
// decoder's token vocabulary.
struct GenModel {
    Vocab vocab;
    MmEncoder enc;
    ArDecoder dec;

    GenModel(EncoderConfig ec, DecoderConfig dc);
    void init(uint64_t seed);
    std::vector<ParamStore*> stores() { return {&enc.params(), &dec.params()}; }
};

void store_model(Checkpoint& ck, const GenModel& m);
void load_model(const Checkpoint& ck, GenModel& m);

struct StagePlan {
    int stage = 1;
    int epochs = 1;
    double lr = 5e-4;
    double warmup_frac = 0.05;
    double clip = 1.0;
    int batch = 32;
    float cfg_drop = 0.1f;
    // Parameter-name prefixes held fixed, minus exceptions. Applied to both
    // stores; decoder names never match the defaults below.
    std::vector<std::string> freeze;
    std::vector<std::string> thaw;
};

// Stage 1: lr 5e-4, 1 epoch, encoder frozen except the connector.
// Stage 2: lr 1e-4, 2 epochs, only the vision tower frozen.
StagePlan stage_plan(int stage);

// Sets trainable flags on both stores per the plan. Returns the frozen names.
std::vector<std::string> apply_freeze(GenModel& m, const StagePlan& plan);

struct WarmupConfig {
    int steps = 300;
    int batch = 32;
    double lr = 1e-3;
    double clip = 1.0;
    float logit_scale = 10.0f;  // inverse temperature on cosine similarities
    uint64_t seed = 0;
};

struct WarmupLog {
    std::vector<double> loss;
    double initial = 0.0, final_loss = 0.0;
};

// Symmetric caption-matching objective on fresh scenes: pooled image features
// against pooled caption features, cross-entropy on the matched diagonal in
// both directions. Trains only the text and vision towers.
WarmupLog contrastive_warmup(GenModel& m, const WarmupConfig& cfg, std::ostream* log = nullptr);

struct StageOpts {
    uint64_t seed = 0;
    std::string out_dir;   // checkpoint directory; empty = keep no checkpoints
    std::string tag;       // checkpoint filename stem
    std::string resume;    // checkpoint path to continue from
    int save_every = 0;    // extra checkpoint every k steps (0 = epoch ends only)
    std::ostream* log = nullptr;  // JSONL step records {step, task, loss, lr}
};

struct StageResult {
    std::string ckpt_path;  // checkpoint written at the final epoch end
    double initial_loss = 0.0;  // mean batch loss, first 10 steps
    double final_loss = 0.0;    // mean batch loss, last 10 steps
    int64_t steps = 0;
};

// One stage over the manifest's train split. Per step: group the batch by
// task, encode each group's conditions, apply CFG context dropout, compute
// teacher-forcing loss on the target's token grid, and take one clipped Adam
// step over both stores. Frozen groups stay bit-identical. Checkpoints land
// at every epoch end (and every save_every steps); a NaN/inf loss aborts
// with NumericError naming the last good checkpoint. Resuming checks the
// manifest hash and stage id, then continues bit-identically.
StageResult train_stage(GenModel& m, VqTokenizer& tok, const StagePlan& plan,
                        const Manifest& data, const ImageStore& store, const StageOpts& opts);

// Ablation matrix: each variant removes exactly one ingredient from the full
// recipe; dropped tasks re-normalize the remaining mix to the same total.
struct AblationVariant {
    std::string name;
    bool run_stage1 = true;
    std::string drop_stage1;  // task removed from the stage-1 mix
    std::string drop_stage2;  // task removed from the stage-2 mix
};

std::vector<std::string> ablation_names();
AblationVariant ablation_variant(const std::string& name);  // ConfigError if unknown

struct RecipeConfig {
    uint64_t seed = 0;
    int stage1_n = 24800;
    int stage2_n = 13000;
    int batch = 32;
    double lr1 = 5e-4, lr2 = 1e-4;
    double clip = 1.0;
    double warmup_frac = 0.05;
    float cfg_drop = 0.1f;
    int epochs1 = 1, epochs2 = 2;
    WarmupConfig warm;
    int save_every = 0;
};

struct RecipeResult {
    std::string ckpt_path;  // final checkpoint (stage 2)
    WarmupLog warm;
    StageResult stage1, stage2;
    uint64_t stage1_hash = 0;  // lineage: hash of the stage-1 checkpoint
};

// Full pipeline for one variant: init from the recipe seed, contrastive
// warm-up, forge the (possibly task-dropped) stage mixes with the shared data
// seed, then run the stages. `no_stage1` keeps the warm-up and skips stage 1.
RecipeResult run_recipe(GenModel& m, VqTokenizer& tok, const AblationVariant& var,
                        const RecipeConfig& cfg, ImageStore& store, const std::string& out_dir,
                        std::ostream* log = nullptr);

}  // namespace argen
