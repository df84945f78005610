#include <cmath>

#include "bifrec/encoders.hpp"
#include "bifrec/errors.hpp"
#include "bifrec/model.hpp"
#include "bifrec/ops.hpp"

namespace bifrec {

FrozenEncoderSet pretrain_standins(const Dataset& corpus, const EncoderConfig& cfg,
                                   uint64_t seed, const PretrainOptions& opt) {
    cfg.validate();
    if (corpus.samples.empty()) throw UsageError("pretrain: empty corpus");

    RandomStream root(seed);
    FrozenEncoderSet set;
    set.image = init_image_encoder(cfg, root.fork("image"));
    set.text = init_text_encoder(cfg, root.fork("text"));
    // random-features stand-in: drawn once from the seed and never trained
    set.audio = init_audio_encoder(cfg, root.fork("audio"));

    std::vector<Tensor> trainable;
    auto collect = [&](const std::string&, Tensor& t) {
        t.set_requires_grad(true);
        trainable.push_back(t);
    };
    visit_tensors(set.image, "image", collect);
    visit_tensors(set.text, "text", collect);
    Tensor log_temp = Tensor::scalar(std::log(0.07)).set_requires_grad(true);
    trainable.push_back(log_temp);

    auto train_idx = corpus.split_indices(true);
    if (train_idx.empty()) train_idx = corpus.split_indices(false);
    BatchSampler sampler(train_idx, opt.batch_size, root.fork("batches"));
    AdamState state;

    for (long step = 1; step <= opt.steps; ++step) {
        auto batch = sampler.next();
        std::vector<Tensor> v_rows, t_rows;
        for (std::size_t idx : batch) {
            const auto& s = corpus.samples[idx];
            v_rows.push_back(image_encode(s.image, set.image, cfg));
            TokenEmbedding emb = embed_tokens(s.caption, set.text, cfg);
            t_rows.push_back(text_encode(emb.seq, set.text, cfg));
        }
        Tensor f_v = concat(v_rows, 0);
        Tensor f_t = concat(t_rows, 0);
        Tensor tau = vexp(log_temp);
        Tensor loss = add(info_nce(f_v, f_t, tau), info_nce(f_t, f_v, tau));
        double loss_value = loss.item();
        if (!std::isfinite(loss_value))
            throw NumericError("pretrain: non-finite loss at step " + std::to_string(step));

        for (auto& t : trainable) t.zero_grad();
        backward(loss);
        adam_step(trainable, state, lr_at(step, opt.schedule), opt.adam);
        double lo = std::log(0.01), hi = std::log(100.0);
        double& lt = log_temp.mutable_data()[0];
        lt = std::min(hi, std::max(lo, lt));

        if (opt.log && opt.log_interval > 0 &&
            (step == 1 || step == opt.steps || step % opt.log_interval == 0))
            opt.log(step, loss_value);
    }

    set_requires_grad(set, false);
    return set;
}

}  // namespace bifrec
