#pragma once

#include <map>
#include <string>
#include <vector>

#include "bifrec/encoders.hpp"

namespace bifrec {

enum class ModelMode { full, pipeline_zero_shot, pipeline_prompted, e2e_only };

std::string mode_name(ModelMode mode);
ModelMode parse_mode(const std::string& name);
bool mode_uses_prompts(ModelMode mode);  // full, pipeline_prompted
bool mode_uses_text(ModelMode mode);     // all but e2e_only
bool mode_uses_e2e(ModelMode mode);      // full, e2e_only
bool mode_trainable(ModelMode mode);     // all but pipeline_zero_shot

struct LossConfig {
    double alpha = 0.1;
    std::size_t batch_size = 32;
    void validate() const;
};

// All model parameters. The frozen set never joins the trainable list; the
// remaining tensors are trainable or not depending on the mode.
struct DualChannelParams {
    EncoderConfig config;
    ModelMode mode = ModelMode::pipeline_zero_shot;
    Tensor prompts;          // (M, d_model)
    Tensor prompt_proj_w;    // (d_model, d_model)
    Tensor prompt_proj_b;    // (d_model)
    E2eWeights e2e;
    Tensor log_temperature;  // scalar, tau = exp(.)
    FrozenEncoderSet frozen;

    double tau() const;
    Tensor tau_tensor() const;  // graph-connected exp(log_temperature)
    void clamp_temperature();   // keeps tau within [0.01, 100]

    // Trainable tensors for the mode; empty for pipeline_zero_shot.
    std::vector<Tensor> trainable();
    // All non-frozen tensors with names, for checkpointing.
    void visit_head_tensors(const TensorVisitor& fn);
};

// Prompt / projection init on top of a frozen set; prompt projection starts
// at identity so the prompted image branch begins near frozen behavior.
DualChannelParams init_params(const EncoderConfig& cfg, ModelMode mode, FrozenEncoderSet frozen,
                           uint64_t seed);

// ---------------------------------------------------------------------------
// Prompting and fusion
// ---------------------------------------------------------------------------

Tensor prepend_text_prompts(const Tensor& prompts, const Tensor& token_embedding);
Tensor prepend_audio_prompts(const Tensor& prompts, const Tensor& z_a);
Tensor project_image_prompts(const Tensor& prompts, const Tensor& proj_w, const Tensor& proj_b);
Tensor fuse(const Tensor& f_a, const Tensor& f_t);  // elementwise sum

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// One-directional temperature-scaled contrastive loss. Rows are unit
// normalized here before the dot products.
Tensor info_nce(const Tensor& f_x, const Tensor& f_y, const Tensor& tau);

struct LossBreakdown {
    Tensor final_loss;
    double final_value = 0.0;
    double inner_value = 0.0;
    double outer_value = 0.0;
};

// final = alpha * inner + (1 - alpha) * outer, with
// outer = L(V->L) + L(L->V) and inner = L(A->T) + L(T->A).
LossBreakdown total_loss(const Tensor& f_v, const Tensor& f_t, const Tensor& f_a,
                         const Tensor& f_l, const LossConfig& cfg, const Tensor& tau);

// ---------------------------------------------------------------------------
// Forward over a batch
// ---------------------------------------------------------------------------

enum class TextSource { asr, ground_truth };

// Caches the frozen audio path (E_A -> Z_A) per sample; it never changes
// during fine-tuning, mirroring transcripts being cached once.
class ZaCache {
public:
    ZaCache(const FrozenEncoderSet* frozen, const EncoderConfig& cfg)
        : frozen_(frozen), cfg_(cfg) {}
    Tensor get(const PairedSample& sample);
    void clear() { cache_.clear(); }

private:
    const FrozenEncoderSet* frozen_;
    EncoderConfig cfg_;
    std::map<long, Tensor> cache_;
};

struct BatchFeatures {
    Tensor f_v;  // (N, d)
    Tensor f_t;  // (N, d) when the text channel runs
    Tensor f_a;  // (N, d) when the e2e channel runs
    Tensor f_l;  // (N, d) final audio-side representation
    bool has_text = false;
    bool has_e2e = false;
};

// Crashed samples: rejected in pipeline modes (exclude them upstream); in
// full mode the text feature falls back to the empty-caption encoding so
// fusion still operates.
BatchFeatures forward_batch(const std::vector<const PairedSample*>& batch,
                            DualChannelParams& params, ModelMode mode,
                            TextSource text_source = TextSource::asr,
                            ZaCache* za_cache = nullptr);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct StepLosses {
    double final_value = 0.0;
    double inner_value = 0.0;
    double outer_value = 0.0;
};

// One forward/backward/Adam cycle over the batch at lr_at(step). Only the
// mode's trainable tensors move; a non-finite loss raises NumericError.
StepLosses train_step(const std::vector<const PairedSample*>& batch, DualChannelParams& params,
                      AdamState& state, const LrSchedule& schedule, long step,
                      const LossConfig& loss_cfg, ZaCache* za_cache,
                      const AdamConfig& adam_cfg = {});

// Draws batches (without replacement within a batch) from the sample pool.
class BatchSampler {
public:
    BatchSampler(std::vector<std::size_t> pool, std::size_t batch_size, RandomStream stream);
    std::vector<std::size_t> next();

private:
    std::vector<std::size_t> pool_;
    std::size_t batch_size_;
    RandomStream stream_;
};

}  // namespace bifrec
