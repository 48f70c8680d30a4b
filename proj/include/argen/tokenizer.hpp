#pragma once

#include <cstdint>
#include <ostream>
#include <vector>

#include "argen/graph.hpp"
#include "argen/image.hpp"
#include "argen/optim.hpp"

namespace argen {

// Convolutional VQ image tokenizer: three stride-2 conv stages (downsample
// factor 8), nearest-code quantization with straight-through gradients, and a
// mirrored upsampling decoder ending in a sigmoid.
struct TokenizerConfig {
    int image_size = 64;
    int base_channels = 24;
    int code_dim = 32;
    int codebook_size = 512;
    float beta = 0.25f;  // commitment loss weight
};

class VqTokenizer {
public:
    explicit VqTokenizer(TokenizerConfig cfg = {});
    void init(uint64_t seed);

    const TokenizerConfig& config() const { return cfg_; }
    ParamStore& params() { return ps_; }
    int grid() const { return cfg_.image_size / 8; }
    int seq_len() const { return grid() * grid(); }

    // Lifetime usage counters, one per code; they sum to the number of latent
    // rows ever quantized through this instance.
    const std::vector<int64_t>& usage() const { return usage_; }

    Ref encode_graph(Graph& g, Ref images) const;               // -> [B*L, code_dim]
    Ref decode_graph(Graph& g, Ref code_rows, int batch) const; // -> [B,3,S,S]

    struct TrainRefs {
        Ref loss, recon, code, commit;
        std::vector<int> indices;
    };
    TrainRefs train_graph(Graph& g, const Tensor& images);

    Tensor tok_encode(const Tensor& images);  // latents, [B*L, code_dim]
    struct Quantized {
        std::vector<int> indices;
        Tensor codes;  // [rows, code_dim]
    };
    Quantized quantize(const Tensor& latents);
    Tensor tok_decode(const std::vector<int>& indices);  // [B,3,S,S]
    std::vector<int> encode_tokens(const Tensor& images);

    // Replaces codes unused since the given usage snapshot with random
    // encoder outputs from `latents`. Returns how many codes were reseeded.
    int reseed_dead_codes(const std::vector<int64_t>& usage_before, const Tensor& latents,
                          Rng& rng);

private:
    TokenizerConfig cfg_;
    ParamStore ps_;
    std::vector<int64_t> usage_;
};

struct TokTrainConfig {
    int epochs = 8;
    int batch = 32;
    double lr = 1e-3;
    double clip = 1.0;
    double warmup_frac = 0.05;
    uint64_t seed = 0;
};

struct TokTrainLog {
    std::vector<double> epoch_loss;   // mean total loss per epoch
    std::vector<double> epoch_recon;  // mean reconstruction mse per epoch
    std::vector<int> reseeded;        // dead codes replaced at each epoch end
    int64_t steps = 0;
};

TokTrainLog tok_train(VqTokenizer& tok, const std::vector<Image>& images,
                      const TokTrainConfig& cfg, Adam& opt, std::ostream* log = nullptr);

// Forward-only quality probes.
double tok_eval_mse(VqTokenizer& tok, const std::vector<Image>& images, int batch = 32);
double token_idempotence(VqTokenizer& tok, const std::vector<Image>& images, int batch = 32);

}  // namespace argen
