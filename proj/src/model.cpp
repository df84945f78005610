#include "bifrec/model.hpp"

#include <algorithm>
#include <cmath>

#include "bifrec/errors.hpp"
#include "bifrec/ops.hpp"

namespace bifrec {

std::string mode_name(ModelMode mode) {
    switch (mode) {
        case ModelMode::full: return "full";
        case ModelMode::pipeline_zero_shot: return "pipeline_zero_shot";
        case ModelMode::pipeline_prompted: return "pipeline_prompted";
        case ModelMode::e2e_only: return "e2e_only";
    }
    throw UsageError("bad mode enum");
}

ModelMode parse_mode(const std::string& name) {
    if (name == "full") return ModelMode::full;
    if (name == "pipeline_zero_shot") return ModelMode::pipeline_zero_shot;
    if (name == "pipeline_prompted") return ModelMode::pipeline_prompted;
    if (name == "e2e_only") return ModelMode::e2e_only;
    throw UsageError("unknown mode '" + name +
                     "' (expected full, pipeline_zero_shot, pipeline_prompted or e2e_only)");
}

bool mode_uses_prompts(ModelMode mode) {
    return mode == ModelMode::full || mode == ModelMode::pipeline_prompted;
}
bool mode_uses_text(ModelMode mode) { return mode != ModelMode::e2e_only; }
bool mode_uses_e2e(ModelMode mode) {
    return mode == ModelMode::full || mode == ModelMode::e2e_only;
}
bool mode_trainable(ModelMode mode) { return mode != ModelMode::pipeline_zero_shot; }

void LossConfig::validate() const {
    if (alpha < 0.0 || alpha > 1.0) throw UsageError("loss config: alpha must lie in [0, 1]");
    if (batch_size == 0) throw UsageError("loss config: batch_size must be positive");
}

double DualChannelParams::tau() const {
    double t = std::exp(log_temperature.data()[0]);
    return std::min(100.0, std::max(0.01, t));
}

Tensor DualChannelParams::tau_tensor() const { return vexp(log_temperature); }

void DualChannelParams::clamp_temperature() {
    double lo = std::log(0.01), hi = std::log(100.0);
    double& v = log_temperature.mutable_data()[0];
    v = std::min(hi, std::max(lo, v));
}

std::vector<Tensor> DualChannelParams::trainable() {
    std::vector<Tensor> out;
    if (!mode_trainable(mode)) return out;
    if (mode_uses_prompts(mode)) {
        out.push_back(prompts);
        out.push_back(prompt_proj_w);
        out.push_back(prompt_proj_b);
    }
    if (mode_uses_e2e(mode)) {
        visit_tensors(e2e, "e2e", [&](const std::string&, Tensor& t) { out.push_back(t); });
    }
    out.push_back(log_temperature);
    return out;
}

void DualChannelParams::visit_head_tensors(const TensorVisitor& fn) {
    fn("prompts", prompts);
    fn("prompt_proj_w", prompt_proj_w);
    fn("prompt_proj_b", prompt_proj_b);
    visit_tensors(e2e, "e2e", fn);
    fn("log_temperature", log_temperature);
}

DualChannelParams init_params(const EncoderConfig& cfg, ModelMode mode, FrozenEncoderSet frozen,
                           uint64_t seed) {
    cfg.validate();
    DualChannelParams p;
    p.config = cfg;
    p.mode = mode;
    p.frozen = std::move(frozen);
    set_requires_grad(p.frozen, false);

    RandomStream rs = RandomStream(seed).fork("head");
    RandomStream prs = rs.fork("prompts");
    p.prompts = Tensor::randn({cfg.prompt_len, cfg.d_model}, prs, 0.02);
    // identity projection: the prompted image branch starts near frozen behavior
    std::vector<double> eye(cfg.d_model * cfg.d_model, 0.0);
    for (std::size_t i = 0; i < cfg.d_model; ++i) eye[i * cfg.d_model + i] = 1.0;
    p.prompt_proj_w = Tensor::from_data({cfg.d_model, cfg.d_model}, std::move(eye));
    p.prompt_proj_b = Tensor::zeros({cfg.d_model});
    p.e2e = init_e2e(cfg, rs.fork("e2e"));
    p.log_temperature = Tensor::scalar(std::log(0.07));

    bool train = mode_trainable(mode);
    bool use_prompts = mode_uses_prompts(mode);
    bool use_e2e = mode_uses_e2e(mode);
    p.prompts.set_requires_grad(train && use_prompts);
    p.prompt_proj_w.set_requires_grad(train && use_prompts);
    p.prompt_proj_b.set_requires_grad(train && use_prompts);
    visit_tensors(p.e2e, "e2e", [&](const std::string&, Tensor& t) {
        t.set_requires_grad(train && use_e2e);
    });
    p.log_temperature.set_requires_grad(train);
    return p;
}

Tensor prepend_text_prompts(const Tensor& prompts, const Tensor& token_embedding) {
    if (!prompts.defined()) return token_embedding;  // M = 0
    if (prompts.rank() != 2 || token_embedding.rank() != 2 ||
        prompts.extent(1) != token_embedding.extent(1))
        throw ShapeError("prepend prompts: width mismatch " + shape_str(prompts.shape()) +
                         " vs " + shape_str(token_embedding.shape()));
    return concat({prompts, token_embedding}, 0);
}

Tensor prepend_audio_prompts(const Tensor& prompts, const Tensor& z_a) {
    return prepend_text_prompts(prompts, z_a);
}

Tensor project_image_prompts(const Tensor& prompts, const Tensor& proj_w,
                             const Tensor& proj_b) {
    return add(matmul(prompts, proj_w), proj_b);
}

Tensor fuse(const Tensor& f_a, const Tensor& f_t) {
    if (f_a.shape() != f_t.shape())
        throw ShapeError("fuse: width mismatch " + shape_str(f_a.shape()) + " vs " +
                         shape_str(f_t.shape()));
    return add(f_a, f_t);
}

Tensor info_nce(const Tensor& f_x, const Tensor& f_y, const Tensor& tau) {
    if (f_x.rank() != 2 || f_y.rank() != 2 || f_x.shape() != f_y.shape())
        throw ShapeError("info_nce: feature blocks must share (N, d), got " +
                         shape_str(f_x.shape()) + " and " + shape_str(f_y.shape()));
    std::size_t n = f_x.extent(0);
    if (n == 0) throw ShapeError("info_nce: empty batch");
    if (tau.numel() != 1 || tau.data()[0] <= 0.0)
        throw NumericError("info_nce: tau must be a positive scalar");

    Tensor sims = matmul(l2_normalize_rows(f_x), transpose(l2_normalize_rows(f_y)));
    Tensor inv_tau = vexp(negate(vlog(tau)));
    Tensor logits = mul(sims, inv_tau);
    Tensor log_probs = vlog(softmax(logits, 1));
    std::vector<double> eye(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) eye[i * n + i] = 1.0;
    Tensor diag_mask = Tensor::from_data({n, n}, std::move(eye));
    return scalar_mul(sum(mul(log_probs, diag_mask)), -1.0 / static_cast<double>(n));
}

LossBreakdown total_loss(const Tensor& f_v, const Tensor& f_t, const Tensor& f_a,
                         const Tensor& f_l, const LossConfig& cfg, const Tensor& tau) {
    cfg.validate();
    LossBreakdown out;
    Tensor outer = add(info_nce(f_v, f_l, tau), info_nce(f_l, f_v, tau));
    Tensor inner = add(info_nce(f_a, f_t, tau), info_nce(f_t, f_a, tau));
    out.final_loss = add(scalar_mul(inner, cfg.alpha), scalar_mul(outer, 1.0 - cfg.alpha));
    out.final_value = out.final_loss.item();
    out.inner_value = inner.item();
    out.outer_value = outer.item();
    return out;
}

Tensor ZaCache::get(const PairedSample& sample) {
    auto it = cache_.find(sample.sample_id);
    if (it != cache_.end()) return it->second;
    NoGradGuard ng;
    Tensor ea = audio_featurize(sample.audio, sample.n_frames, frozen_->audio, cfg_);
    Tensor za = whisper_encode_standin(ea, frozen_->audio, cfg_);
    cache_.emplace(sample.sample_id, za);
    return za;
}

namespace {

Tensor encode_text_feature(const std::vector<int>& tokens, DualChannelParams& params,
                           bool prompted) {
    TokenEmbedding emb = embed_tokens(tokens, params.frozen.text, params.config);
    Tensor seq = prompted ? prepend_text_prompts(params.prompts, emb.seq) : emb.seq;
    return text_encode(seq, params.frozen.text, params.config);
}

}  // namespace

BatchFeatures forward_batch(const std::vector<const PairedSample*>& batch,
                            DualChannelParams& params, ModelMode mode, TextSource text_source,
                            ZaCache* za_cache) {
    if (mode != params.mode)
        throw UsageError("forward_batch: params were built for mode " + mode_name(params.mode) +
                         " but " + mode_name(mode) + " was requested");
    if (batch.empty()) throw UsageError("forward_batch: empty batch");

    bool prompted = mode_uses_prompts(mode);
    bool with_text = mode_uses_text(mode);
    bool with_e2e = mode_uses_e2e(mode);

    ZaCache local_cache(&params.frozen, params.config);
    ZaCache& za = za_cache ? *za_cache : local_cache;

    std::optional<Tensor> image_prompts;
    if (prompted)
        image_prompts =
            project_image_prompts(params.prompts, params.prompt_proj_w, params.prompt_proj_b);

    std::vector<Tensor> v_rows, t_rows, a_rows;
    for (const auto* s : batch) {
        v_rows.push_back(image_encode(s->image, params.frozen.image, params.config,
                                      image_prompts));
        if (with_text) {
            const std::vector<int>* tokens;
            std::vector<int> empty;
            if (text_source == TextSource::ground_truth) {
                tokens = &s->caption;
            } else if (s->has_transcription) {
                tokens = &s->transcription;
            } else if (mode == ModelMode::full) {
                tokens = &empty;  // crash remedy: begin-token-only encoding
            } else {
                throw UsageError("forward_batch: crashed-ASR sample " +
                                 std::to_string(s->sample_id) +
                                 " must be excluded upstream in pipeline modes");
            }
            t_rows.push_back(encode_text_feature(*tokens, params, prompted));
        }
        if (with_e2e) {
            Tensor z_a = za.get(*s);
            Tensor z_hat = prompted ? prepend_audio_prompts(params.prompts, z_a) : z_a;
            a_rows.push_back(acoustic_encode(z_hat, params.e2e, params.config));
        }
    }

    BatchFeatures out;
    out.f_v = concat(v_rows, 0);
    out.has_text = with_text;
    out.has_e2e = with_e2e;
    if (with_text) out.f_t = concat(t_rows, 0);
    if (with_e2e) out.f_a = concat(a_rows, 0);
    switch (mode) {
        case ModelMode::full: out.f_l = fuse(out.f_a, out.f_t); break;
        case ModelMode::pipeline_zero_shot:
        case ModelMode::pipeline_prompted: out.f_l = out.f_t; break;
        case ModelMode::e2e_only: out.f_l = out.f_a; break;
    }
    return out;
}

StepLosses train_step(const std::vector<const PairedSample*>& batch, DualChannelParams& params,
                      AdamState& state, const LrSchedule& schedule, long step,
                      const LossConfig& loss_cfg, ZaCache* za_cache,
                      const AdamConfig& adam_cfg) {
    if (!mode_trainable(params.mode))
        throw UsageError("train_step: " + mode_name(params.mode) +
                         " runs without fine-tuning or prompting");

    BatchFeatures f = forward_batch(batch, params, params.mode, TextSource::asr, za_cache);
    Tensor tau = params.tau_tensor();

    StepLosses losses;
    Tensor loss;
    if (f.has_text && f.has_e2e) {
        LossBreakdown lb = total_loss(f.f_v, f.f_t, f.f_a, f.f_l, loss_cfg, tau);
        loss = lb.final_loss;
        losses = {lb.final_value, lb.inner_value, lb.outer_value};
    } else {
        // single-channel modes train on the outer loss alone
        loss = add(info_nce(f.f_v, f.f_l, tau), info_nce(f.f_l, f.f_v, tau));
        losses.final_value = losses.outer_value = loss.item();
    }
    if (!std::isfinite(losses.final_value))
        throw NumericError("train_step: non-finite loss at step " + std::to_string(step));

    auto trainable = params.trainable();
    for (auto& t : trainable) t.zero_grad();
    backward(loss);
    adam_step(trainable, state, lr_at(step, schedule), adam_cfg);
    params.clamp_temperature();
    return losses;
}

BatchSampler::BatchSampler(std::vector<std::size_t> pool, std::size_t batch_size,
                           RandomStream stream)
    : pool_(std::move(pool)), batch_size_(batch_size), stream_(stream) {
    if (pool_.empty()) throw UsageError("batch sampler: empty sample pool");
}

std::vector<std::size_t> BatchSampler::next() {
    std::size_t take = std::min(batch_size_, pool_.size());
    // partial Fisher-Yates: the first `take` entries become the batch
    for (std::size_t i = 0; i < take; ++i) {
        std::size_t j = i + stream_.uniform_index(pool_.size() - i);
        std::swap(pool_[i], pool_[j]);
    }
    return std::vector<std::size_t>(pool_.begin(), pool_.begin() + static_cast<long>(take));
}

}  // namespace bifrec
