#pragma once

// Multimodal condition encoder. Turns a caption plus zero or more condition
// images into a unified context matrix H of M rows:
//   [ text rows (t_max) | image block 0 | image block 1 | ... ]
// Text goes through a from-scratch token transformer, images through a
// patch transformer, and each image block is mapped to context rows by a
// selectable connector: a per-token MLP projection, or distillation onto a
// fixed set of learned query vectors.

#include "argen/blocks.hpp"
#include "argen/graph.hpp"
#include "argen/image.hpp"
#include "argen/rng.hpp"
#include "argen/vocab.hpp"

#include <string>
#include <vector>

namespace argen {

struct EncoderConfig {
    int d = 256;
    int heads = 4;
    int ff = 0;            // 0 -> 4*d
    int text_layers = 4;
    int vis_layers = 4;
    int t_max = 40;
    int vocab_size = 0;    // set from the vocabulary in use
    int patch = 8;
    int image_size = 64;
    std::string connector = "mlp";  // "mlp" | "query_distill"
    int mlp_hidden = 0;    // 0 -> 2*d; must end up >= d
    int n_query = 16;      // query_distill: K_q context rows per image
    int query_layers = 2;  // query_distill: distillation depth
    int max_images = 4;    // context budget

    void validate() const;  // ConfigError on bad values
    int ff_dim() const { return ff > 0 ? ff : 4 * d; }
    int mlp_dim() const { return mlp_hidden > 0 ? mlp_hidden : 2 * d; }
    int patches_per_image() const;
};

// One sample's conditioning: a caption (possibly empty) and condition images
// in input order.
struct CondSample {
    std::string text;
    std::vector<Image> images;
};

// Batched unified context. h holds B*M rows; row (b, m) is h row b*M + m.
// Rows 0..text_rows-1 of each sample are text; after that come `slots`
// image blocks of rows_per_image rows each. Samples with fewer images than
// `slots` have their missing blocks marked invalid.
struct EncodedContext {
    Ref h;
    int B = 0;
    int M = 0;
    int text_rows = 0;
    int rows_per_image = 0;
    int slots = 0;
    std::vector<uint8_t> valid;    // B*M, 1 = row may be attended
    std::vector<int> segment;      // B*M: 0 = text, k >= 1 = image block k
    std::vector<int> images_per_sample;
    bool truncated = false;        // any caption exceeded t_max
};

class MmEncoder {
public:
    explicit MmEncoder(EncoderConfig cfg);

    void init(Rng& rng);  // create all parameters (names under "enc.")
    ParamStore& params() { return ps_; }
    const ParamStore& params() const { return ps_; }
    const EncoderConfig& config() const { return cfg_; }

    int rows_per_image() const;             // per-block context rows
    int context_rows(int slots) const { return cfg_.t_max + slots * rows_per_image(); }

    // Text features [B*t_max, d] from flat ids/mask (each sample t_max long).
    // Padded rows only see themselves and are hidden from real rows.
    Ref embed_text(Graph& g, const std::vector<int>& ids,
                   const std::vector<uint8_t>& mask, int B);

    // Visual tokens [N*P, d] from an image stack [N, 3, S, S].
    Ref embed_image(Graph& g, Ref images, int N);

    // MLP connector: per-token projection, row count preserved.
    Ref connect_mlp(Graph& g, Ref vis);

    // Query connector: K_q learned queries plus the owning sample's text rows
    // form the query-side sequence for each image; the stack alternates
    // self-attention with cross-attention onto that image's visual tokens.
    // Returns the K_q distilled rows per image, [N*K_q, d].
    Ref distill_queries(Graph& g, Ref vis, const std::vector<int>& owner,
                        Ref text, const std::vector<uint8_t>& text_mask, int B);

    // Full assembly: per-sample text + per-image connector blocks, plus
    // modality and image-index embeddings. CapacityError if a sample brings
    // more than max_images images. When `pixels` is a valid ref it is used
    // as the stacked image input [N,3,S,S] (images in batch order) instead
    // of an internally created one, so callers can differentiate through
    // the raw pixels.
    EncodedContext encode_context(Graph& g, const Vocab& v,
                                  const std::vector<CondSample>& batch,
                                  Ref pixels = {});

private:
    EncoderConfig cfg_;
    ParamStore ps_;
};

// Masked per-sample mean over consecutive row groups: x has B*rows_per rows;
// returns [B, d]. mask (optional, length B*rows_per) selects rows; a group
// with no selected rows falls back to a uniform mean.
Ref pooled_rows(Graph& g, Ref x, int B, int rows_per, const std::vector<uint8_t>* mask);

} // namespace argen
