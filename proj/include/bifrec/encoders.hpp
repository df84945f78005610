#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "bifrec/data.hpp"
#include "bifrec/optim.hpp"
#include "bifrec/tensor.hpp"

namespace bifrec {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct EncoderConfig {
    std::size_t d_model = 32;
    std::size_t n_layers = 2;
    std::size_t n_heads = 2;
    std::size_t d_ff = 64;
    std::size_t max_text_len = 64;
    std::size_t max_audio_len = 160;
    std::size_t vocab_size_ = 64;
    std::size_t n_patches = 16;
    std::size_t patch_dim_ = 16;
    std::size_t frame_dim = 16;
    std::size_t prompt_len = 4;

    void validate() const;
    std::size_t head_dim() const { return d_model / n_heads; }
    std::size_t text_budget() const { return max_text_len - prompt_len; }
};

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

// Pre-norm encoder layer: x + attn(LN(x)), then y + ffn(LN(y)).
struct LayerWeights {
    Tensor ln1_g, ln1_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b;
    Tensor w1, b1, w2, b2;
};

struct TransformerStack {
    std::vector<LayerWeights> layers;
};

struct ImageEncoderWeights {
    Tensor patch_w, patch_b;  // patch_dim -> d_model
    Tensor pos;               // (n_patches, d_model)
    Tensor cls;               // (1, d_model)
    TransformerStack stack;
};

struct TextEncoderWeights {
    Tensor token_table;  // (vocab_size, d_model)
    Tensor pos;          // (max_text_len, d_model)
    Tensor cls;
    TransformerStack stack;
};

struct AudioEncoderWeights {
    Tensor frame_w, frame_b;  // frame_dim -> d_model
    Tensor pos;               // (max_audio_len, d_model)
    TransformerStack stack;   // no class token: output stays a sequence
};

struct FrozenEncoderSet {
    ImageEncoderWeights image;
    TextEncoderWeights text;
    AudioEncoderWeights audio;
};

// Single trainable encoder layer over prompted audio features, pooled
// through its own class token.
struct E2eWeights {
    Tensor cls;
    LayerWeights layer;
};

using TensorVisitor = std::function<void(const std::string&, Tensor&)>;

void visit_tensors(LayerWeights& w, const std::string& prefix, const TensorVisitor& fn);
void visit_tensors(TransformerStack& s, const std::string& prefix, const TensorVisitor& fn);
void visit_tensors(ImageEncoderWeights& w, const std::string& prefix, const TensorVisitor& fn);
void visit_tensors(TextEncoderWeights& w, const std::string& prefix, const TensorVisitor& fn);
void visit_tensors(AudioEncoderWeights& w, const std::string& prefix, const TensorVisitor& fn);
void visit_tensors(FrozenEncoderSet& s, const TensorVisitor& fn);  // image./text./audio.
void visit_tensors(E2eWeights& w, const std::string& prefix, const TensorVisitor& fn);

LayerWeights init_layer(const EncoderConfig& cfg, RandomStream rs);
ImageEncoderWeights init_image_encoder(const EncoderConfig& cfg, RandomStream rs);
TextEncoderWeights init_text_encoder(const EncoderConfig& cfg, RandomStream rs);
AudioEncoderWeights init_audio_encoder(const EncoderConfig& cfg, RandomStream rs);
E2eWeights init_e2e(const EncoderConfig& cfg, RandomStream rs);

void set_requires_grad(FrozenEncoderSet& set, bool rg);

// ---------------------------------------------------------------------------
// Forward pieces
// ---------------------------------------------------------------------------

Tensor transformer_layer(const Tensor& x, const LayerWeights& w, std::size_t n_heads);
Tensor transformer_encode(const Tensor& seq, const TransformerStack& stack,
                          const EncoderConfig& cfg, std::size_t max_len);
Tensor pool_sequence(const Tensor& seq);  // class-token row as (1, d)

Tensor embed_patches(const std::vector<double>& image, const ImageEncoderWeights& w,
                     const EncoderConfig& cfg);

struct TokenEmbedding {
    Tensor seq;
    bool truncated = false;
};
// Empty token lists embed as a single begin-token row.
TokenEmbedding embed_tokens(const std::vector<int>& tokens, const TextEncoderWeights& w,
                            const EncoderConfig& cfg);

Tensor image_encode(const std::vector<double>& image, const ImageEncoderWeights& w,
                    const EncoderConfig& cfg,
                    const std::optional<Tensor>& image_prompts = std::nullopt);
// Prompts, when used, are prepended to the embedded tokens by the caller.
Tensor text_encode(const Tensor& embedded_tokens, const TextEncoderWeights& w,
                   const EncoderConfig& cfg);

Tensor audio_featurize(const std::vector<double>& frames, std::size_t n_frames,
                       const AudioEncoderWeights& w, const EncoderConfig& cfg);
Tensor whisper_encode_standin(const Tensor& e_a, const AudioEncoderWeights& w,
                              const EncoderConfig& cfg);
Tensor acoustic_encode(const Tensor& z_hat, const E2eWeights& e2e, const EncoderConfig& cfg);

// ---------------------------------------------------------------------------
// Procedural ASR stand-in
// ---------------------------------------------------------------------------

struct AsrConfig {
    double target_wer = 0.0;
    double wer_jitter = 0.0;
    double drop_filler_prob = 0.0;
    double crash_prob = 0.0;
    void validate() const;
};

struct AsrOutcome {
    bool crashed = false;
    std::vector<int> transcription;
    double realized_wer = 0.0;
};

AsrOutcome asr_decode_standin(const PairedSample& sample, const AsrConfig& cfg,
                              RandomStream stream);

// Resolves every sample's transcription in place, streams keyed by
// (seed, sample_id) so the outcome is independent of iteration order.
void resolve_asr(Dataset& dataset, const AsrConfig& cfg, uint64_t seed);

// ---------------------------------------------------------------------------
// Pretraining of the frozen stand-ins
// ---------------------------------------------------------------------------

struct PretrainOptions {
    long steps = 2000;
    std::size_t batch_size = 32;
    LrSchedule schedule{5e-3, 200, 1e-5, 2000};
    // No weight decay here: with L2 folded into Adam's gradient, feature
    // channels the corpus never exercises (e.g. tint) would be driven to
    // zero at ~lr per step, destroying them for later runs.
    AdamConfig adam{0.9, 0.999, 1e-8, 0.0};
    long log_interval = 50;
    // called as (step, loss) when log_interval divides step
    std::function<void(long, double)> log = nullptr;
};

// Trains image and text encoders jointly with the symmetric contrastive
// loss on (image, ground-truth caption) pairs from the corpus train split;
// the audio encoder keeps its seeded random weights. Everything returned
// is frozen.
FrozenEncoderSet pretrain_standins(const Dataset& corpus, const EncoderConfig& cfg,
                                   uint64_t seed, const PretrainOptions& opt = {});

}  // namespace bifrec
