#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "bifrec/commands.hpp"
#include "bifrec/errors.hpp"
#include "bifrec/model.hpp"
#include "bifrec/ops.hpp"

using namespace bifrec;

namespace {

EncoderConfig small_config() {
    EncoderConfig cfg;
    cfg.d_model = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 16;
    cfg.max_text_len = 48;
    cfg.max_audio_len = 130;
    cfg.vocab_size_ = vocab_size();
    cfg.prompt_len = 4;
    return cfg;
}

FrozenEncoderSet random_frozen(const EncoderConfig& cfg, uint64_t seed) {
    RandomStream root(seed);
    FrozenEncoderSet set;
    set.image = init_image_encoder(cfg, root.fork("image"));
    set.text = init_text_encoder(cfg, root.fork("text"));
    set.audio = init_audio_encoder(cfg, root.fork("audio"));
    set_requires_grad(set, false);
    return set;
}

std::vector<const PairedSample*> as_batch(const Dataset& ds, std::size_t n) {
    std::vector<const PairedSample*> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(&ds.samples[i]);
    return out;
}

}  // namespace

TEST_CASE("prompt prepending: identity at M=0, bit-equal prefix, widths enforced") {
    RandomStream rs(1);
    Tensor et = Tensor::randn({10, 8}, rs);
    CHECK(prepend_text_prompts(Tensor(), et).data() == et.data());

    Tensor prompts = Tensor::randn({4, 8}, rs);
    Tensor hat = prepend_text_prompts(prompts, et);
    REQUIRE(hat.shape() == std::vector<std::size_t>{14, 8});
    for (std::size_t i = 0; i < 32; ++i) CHECK(hat.data()[i] == prompts.data()[i]);

    Tensor za = Tensor::randn({20, 8}, rs);
    Tensor zhat = prepend_audio_prompts(prompts, za);
    CHECK(zhat.extent(0) == 24);

    Tensor narrow = Tensor::randn({3, 4}, rs);
    CHECK_THROWS_AS(prepend_text_prompts(prompts, narrow), ShapeError);
}

TEST_CASE("image prompt projection: identity and constant-bias cases, gradients flow") {
    std::vector<double> eye(64, 0.0);
    for (int i = 0; i < 8; ++i) eye[i * 8 + i] = 1.0;
    Tensor w = Tensor::from_data({8, 8}, eye);
    Tensor b = Tensor::zeros({8});
    RandomStream rs(2);
    Tensor prompts = Tensor::randn({4, 8}, rs);
    CHECK(project_image_prompts(prompts, w, b).data() == prompts.data());

    Tensor zero_w = Tensor::zeros({8, 8});
    Tensor bias = Tensor::full({8}, 0.25);
    Tensor pv = project_image_prompts(prompts, zero_w, bias);
    for (double v : pv.data()) CHECK(v == doctest::Approx(0.25));

    // analytic gradient through the projection matches finite differences
    Tensor lw = w.detach_copy().set_requires_grad(true);
    Tensor lp = prompts.detach_copy().set_requires_grad(true);
    RandomStream wrs(3);
    Tensor weights = Tensor::randn({4, 8}, wrs);
    backward(sum(mul(project_image_prompts(lp, lw, b), weights)));
    auto f = [&](const Tensor& x) {
        NoGradGuard ng;
        return sum(mul(project_image_prompts(prompts, x, b), weights)).item();
    };
    Tensor fd = finite_diff_grad(f, w, 1e-5);
    for (std::size_t i = 0; i < fd.numel(); ++i)
        CHECK(std::fabs(lw.grad()[i] - fd.data()[i]) < 1e-6);
}

TEST_CASE("fuse: zero neutrality and the degenerate-cancellation path") {
    RandomStream rs(4);
    Tensor fa = Tensor::randn({1, 8}, rs);
    Tensor zero = Tensor::zeros({1, 8});
    CHECK(fuse(fa, zero).data() == fa.data());
    CHECK(fuse(zero, fa).data() == fa.data());

    Tensor neg = scalar_mul(fa, -1.0);
    Tensor cancelled = fuse(fa, neg);
    Tensor normalized = l2_normalize_rows(cancelled);
    for (double v : normalized.data()) CHECK(v == 0.0);  // zero-norm rule engaged

    CHECK_THROWS_AS(fuse(fa, Tensor::zeros({1, 4})), ShapeError);
}

TEST_CASE("info_nce closed forms") {
    Tensor tau1 = Tensor::scalar(1.0);

    // N=1: softmax over a single element
    RandomStream rs(5);
    Tensor single = Tensor::randn({1, 6}, rs);
    CHECK(info_nce(single, single, tau1).item() == doctest::Approx(0.0).epsilon(1e-15));

    // N=2 orthonormal pair: log(1 + e^{-1/tau}) per direction at tau=1
    Tensor fx = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    double expected = std::log(1.0 + std::exp(-1.0));
    CHECK(std::fabs(info_nce(fx, fx, tau1).item() - expected) < 1e-10);
    CHECK(std::fabs(info_nce(fx, fx, tau1).item() - 0.31326) < 1e-5);

    // all pairwise sims equal -> log N exactly
    Tensor same_rows = Tensor::from_data({4, 3}, {1, 2, 3, 1, 2, 3, 1, 2, 3, 1, 2, 3});
    CHECK(std::fabs(info_nce(same_rows, same_rows, tau1).item() - std::log(4.0)) < 1e-10);

    // positivity for N >= 2 at finite tau
    Tensor a = Tensor::randn({5, 6}, rs);
    Tensor b = Tensor::randn({5, 6}, rs);
    CHECK(info_nce(a, b, tau1).item() > 0.0);

    CHECK_THROWS_AS(info_nce(a, b, Tensor::scalar(0.0)), NumericError);
    CHECK_THROWS_AS(info_nce(a, b, Tensor::scalar(-1.0)), NumericError);
    CHECK_THROWS_AS(info_nce(a, Tensor::randn({4, 6}, rs), tau1), ShapeError);
}

TEST_CASE("total_loss composition at the alpha limits") {
    RandomStream rs(6);
    Tensor fv = Tensor::randn({6, 8}, rs);
    Tensor ft = Tensor::randn({6, 8}, rs);
    Tensor fa = Tensor::randn({6, 8}, rs);
    Tensor fl = add(fa, ft);
    Tensor tau = Tensor::scalar(0.5);

    LossConfig zero;
    zero.alpha = 0.0;
    auto at0 = total_loss(fv, ft, fa, fl, zero, tau);
    CHECK(at0.final_value == doctest::Approx(at0.outer_value).epsilon(1e-15));

    LossConfig one;
    one.alpha = 1.0;
    auto at1 = total_loss(fv, ft, fa, fl, one, tau);
    CHECK(at1.final_value == doctest::Approx(at1.inner_value).epsilon(1e-15));

    LossConfig def;  // alpha = 0.1 default
    CHECK(def.alpha == doctest::Approx(0.1));
    auto mid = total_loss(fv, ft, fa, fl, def, tau);
    CHECK(mid.final_value ==
          doctest::Approx(0.1 * mid.inner_value + 0.9 * mid.outer_value).epsilon(1e-12));

    LossConfig bad;
    bad.alpha = 1.5;
    CHECK_THROWS_AS(total_loss(fv, ft, fa, fl, bad, tau), UsageError);
}

TEST_CASE("loss invariances: joint batch permutation and pre-normalization scale") {
    RandomStream rs(7);
    std::size_t n = 6, d = 8;
    Tensor fv = Tensor::randn({n, d}, rs);
    Tensor fl = Tensor::randn({n, d}, rs);
    Tensor tau = Tensor::scalar(0.3);
    double base = info_nce(fv, fl, tau).item();

    std::vector<std::size_t> perm = {4, 2, 0, 5, 1, 3};
    std::vector<double> pv(n * d), pl(n * d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            pv[i * d + j] = fv.data()[perm[i] * d + j];
            pl[i * d + j] = fl.data()[perm[i] * d + j];
        }
    double permuted =
        info_nce(Tensor::from_data({n, d}, pv), Tensor::from_data({n, d}, pl), tau).item();
    CHECK(std::fabs(permuted - base) < 1e-10);

    double scaled = info_nce(scalar_mul(fv, 7.5), fl, tau).item();
    CHECK(std::fabs(scaled - base) < 1e-10);
}

TEST_CASE("full inner-outer loss gradient matches finite differences on every trainable") {
    EncoderConfig cfg = small_config();
    Dataset ds = generate_dataset(DatasetStyle::mood_aware, 4, 1, 50);
    resolve_asr(ds, AsrConfig{}, 3);
    DualChannelParams params = init_params(cfg, ModelMode::full, random_frozen(cfg, 8), 9);
    LossConfig loss_cfg;
    loss_cfg.batch_size = 4;
    auto batch = as_batch(ds, 4);

    auto loss_value = [&]() {
        BatchFeatures f = forward_batch(batch, params, ModelMode::full);
        return total_loss(f.f_v, f.f_t, f.f_a, f.f_l, loss_cfg, params.tau_tensor());
    };

    auto trainable = params.trainable();
    for (auto& t : trainable) t.zero_grad();
    backward(loss_value().final_loss);

    // check a representative subset: prompts, projection, e2e attention, temperature
    std::vector<Tensor> checked = {params.prompts, params.prompt_proj_w, params.e2e.layer.wq,
                                   params.e2e.cls, params.log_temperature};
    for (auto& target : checked) {
        REQUIRE(target.has_grad());
        auto f = [&](const Tensor& x) {
            NoGradGuard ng;
            std::vector<double> saved = target.data();
            target.mutable_data() = x.data();
            double v = loss_value().final_value;
            target.mutable_data() = saved;
            return v;
        };
        Tensor fd = finite_diff_grad(f, target, 1e-5);
        bool nonzero = false;
        for (std::size_t i = 0; i < fd.numel(); ++i) {
            double denom = std::max({1.0, std::fabs(target.grad()[i]), std::fabs(fd.data()[i])});
            CHECK(std::fabs(target.grad()[i] - fd.data()[i]) / denom < 1e-4);
            nonzero = nonzero || std::fabs(fd.data()[i]) > 1e-9;
        }
        CHECK(nonzero);  // gradient actually reaches this parameter
    }
}

TEST_CASE("shared prompts feed both channels as one parameter") {
    EncoderConfig cfg = small_config();
    Dataset ds = generate_dataset(DatasetStyle::scripted, 4, 1, 51);
    resolve_asr(ds, AsrConfig{}, 3);
    DualChannelParams params = init_params(cfg, ModelMode::full, random_frozen(cfg, 8), 10);
    AdamState state;
    LrSchedule sched{1e-2, 1, 1e-3, 10};
    LossConfig loss_cfg;
    auto before = params.prompts.data();
    train_step(as_batch(ds, 4), params, state, sched, 1, loss_cfg, nullptr);
    CHECK(params.prompts.data() != before);

    // both prepended prefixes are whatever the single tensor now holds
    RandomStream rs(11);
    Tensor et = Tensor::randn({5, cfg.d_model}, rs);
    Tensor za = Tensor::randn({9, cfg.d_model}, rs);
    Tensor that = prepend_text_prompts(params.prompts, et);
    Tensor ahat = prepend_audio_prompts(params.prompts, za);
    for (std::size_t i = 0; i < cfg.prompt_len * cfg.d_model; ++i)
        CHECK(that.data()[i] == ahat.data()[i]);
}

TEST_CASE("forward_batch mode contracts") {
    EncoderConfig cfg = small_config();
    Dataset ds = generate_dataset(DatasetStyle::scripted, 4, 2, 52);
    resolve_asr(ds, AsrConfig{}, 3);

    DualChannelParams zs = init_params(cfg, ModelMode::pipeline_zero_shot, random_frozen(cfg, 8), 1);
    auto batch = as_batch(ds, 4);
    BatchFeatures f1 = forward_batch(batch, zs, ModelMode::pipeline_zero_shot);
    BatchFeatures f2 = forward_batch(batch, zs, ModelMode::pipeline_zero_shot);
    CHECK(f1.f_v.data() == f2.f_v.data());
    CHECK(f1.f_l.data() == f2.f_l.data());
    CHECK(f1.f_l.data() == f1.f_t.data());
    CHECK_FALSE(f1.has_e2e);
    CHECK(zs.trainable().empty());

    DualChannelParams e2e = init_params(cfg, ModelMode::e2e_only, random_frozen(cfg, 8), 1);
    BatchFeatures fe = forward_batch(batch, e2e, ModelMode::e2e_only);
    CHECK_FALSE(fe.has_text);
    CHECK_FALSE(fe.f_t.defined());
    CHECK(fe.f_l.data() == fe.f_a.data());

    // full mode: audio features carry mood, so fusion shifts F_L away from F_T
    Dataset moody = generate_dataset(DatasetStyle::mood_aware, 4, 1, 53);
    resolve_asr(moody, AsrConfig{}, 3);
    DualChannelParams full = init_params(cfg, ModelMode::full, random_frozen(cfg, 8), 1);
    BatchFeatures ff = forward_batch(as_batch(moody, 4), full, ModelMode::full);
    CHECK(ff.f_l.data() != ff.f_t.data());

    CHECK_THROWS_AS(forward_batch(batch, zs, ModelMode::full), UsageError);
}

TEST_CASE("text channel is mood-blind while Z_A is mood-sensitive") {
    EncoderConfig cfg = small_config();
    FrozenEncoderSet frozen = random_frozen(cfg, 88);
    std::vector<int> caption = {object_token(2), color_token(1), cell_token(7)};

    PairedSample a, b;
    a.sample_id = 1;
    b.sample_id = 2;
    a.caption = b.caption = caption;
    a.mood = 1;
    b.mood = 3;
    a.audio = synthesize_audio(caption, a.mood, RandomStream(5), 0.0);
    b.audio = synthesize_audio(caption, b.mood, RandomStream(5), 0.0);
    a.n_frames = b.n_frames = caption.size() * kFramesPerToken;
    a.has_transcription = b.has_transcription = true;
    a.transcription = b.transcription = caption;

    TokenEmbedding ea = embed_tokens(a.transcription, frozen.text, cfg);
    TokenEmbedding eb = embed_tokens(b.transcription, frozen.text, cfg);
    Tensor fta = text_encode(ea.seq, frozen.text, cfg);
    Tensor ftb = text_encode(eb.seq, frozen.text, cfg);
    CHECK(fta.data() == ftb.data());  // bit-identical

    ZaCache za(&frozen, cfg);
    Tensor za_a = za.get(a);
    Tensor za_b = za.get(b);
    double na = 0, nb = 0;
    for (double v : za_a.data()) na += v * v;
    for (double v : za_b.data()) nb += v * v;
    CHECK(std::fabs(std::sqrt(na) - std::sqrt(nb)) > 1e-6);
}

TEST_CASE("train_step: frozen weights byte-identical, zero-shot rejected") {
    EncoderConfig cfg = small_config();
    Dataset ds = generate_dataset(DatasetStyle::scripted, 6, 2, 54);
    resolve_asr(ds, AsrConfig{}, 3);
    LossConfig loss_cfg;
    LrSchedule sched{5e-3, 2, 1e-4, 50};

    for (ModelMode mode :
         {ModelMode::full, ModelMode::pipeline_prompted, ModelMode::e2e_only}) {
        DualChannelParams params = init_params(cfg, mode, random_frozen(cfg, 8), 2);
        auto before = frozen_bytes(params);
        AdamState state;
        for (long step = 1; step <= 3; ++step)
            train_step(as_batch(ds, 6), params, state, sched, step, loss_cfg, nullptr);
        CHECK(frozen_bytes(params) == before);
    }

    DualChannelParams zs = init_params(cfg, ModelMode::pipeline_zero_shot, random_frozen(cfg, 8), 2);
    AdamState state;
    CHECK_THROWS_AS(train_step(as_batch(ds, 4), zs, state, sched, 1, loss_cfg, nullptr),
                    UsageError);
}

TEST_CASE("initial loss on random data sits near the uniform-softmax value") {
    EncoderConfig cfg = small_config();
    Dataset ds = generate_dataset(DatasetStyle::scripted, 32, 1, 55);
    resolve_asr(ds, AsrConfig{}, 3);
    DualChannelParams params =
        init_params(cfg, ModelMode::pipeline_prompted, random_frozen(cfg, 31), 2);
    BatchFeatures f = forward_batch(as_batch(ds, 32), params, ModelMode::pipeline_prompted);
    Tensor tau = Tensor::scalar(1.0);  // tame temperature keeps sims near-uniform
    double outer = add(info_nce(f.f_v, f.f_l, tau), info_nce(f.f_l, f.f_v, tau)).item();
    double expected = 2.0 * std::log(32.0);
    CHECK(outer > 0.8 * expected);
    CHECK(outer < 1.2 * expected);
}

TEST_CASE("two hundred steps on a toy set halve the loss") {
    EncoderConfig cfg = small_config();
    cfg.d_model = 16;  // room to separate 64 pairs
    cfg.d_ff = 32;
    Dataset ds = generate_dataset(DatasetStyle::scripted, 64, 1, 56);
    resolve_asr(ds, AsrConfig{}, 3);
    DualChannelParams params = init_params(cfg, ModelMode::full, random_frozen(cfg, 31), 2);
    LossConfig loss_cfg;
    loss_cfg.batch_size = 16;
    LrSchedule sched{1e-2, 20, 1e-4, 200};
    std::vector<std::size_t> pool(ds.samples.size());
    for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
    BatchSampler sampler(pool, 16, RandomStream(77));
    AdamState state;
    ZaCache za(&params.frozen, cfg);
    double first_10 = 0, last_10 = 0;
    for (long step = 1; step <= 200; ++step) {
        auto idx = sampler.next();
        std::vector<const PairedSample*> batch;
        for (auto i : idx) batch.push_back(&ds.samples[i]);
        auto losses = train_step(batch, params, state, sched, step, loss_cfg, &za);
        if (step <= 10) first_10 += losses.final_value;
        if (step > 190) last_10 += losses.final_value;
    }
    CHECK(last_10 <= 0.5 * first_10);
}

TEST_CASE("crashed samples: rejected in pipeline batches, remedied in full mode") {
    EncoderConfig cfg = small_config();
    Dataset ds = generate_dataset(DatasetStyle::scripted, 4, 1, 57);
    AsrConfig all_crash;
    all_crash.crash_prob = 1.0;
    resolve_asr(ds, all_crash, 3);

    DualChannelParams pip =
        init_params(cfg, ModelMode::pipeline_prompted, random_frozen(cfg, 8), 2);
    CHECK_THROWS_AS(forward_batch(as_batch(ds, 4), pip, ModelMode::pipeline_prompted),
                    UsageError);

    DualChannelParams full = init_params(cfg, ModelMode::full, random_frozen(cfg, 8), 2);
    BatchFeatures f = forward_batch(as_batch(ds, 4), full, ModelMode::full);
    CHECK(f.f_t.defined());  // empty-caption encodings stand in
    for (double v : f.f_l.data()) CHECK(std::isfinite(v));
}

TEST_CASE("temperature stays clamped") {
    EncoderConfig cfg = small_config();
    DualChannelParams params = init_params(cfg, ModelMode::full, random_frozen(cfg, 8), 2);
    params.log_temperature.mutable_data()[0] = 50.0;
    params.clamp_temperature();
    CHECK(params.tau() == doctest::Approx(100.0));
    params.log_temperature.mutable_data()[0] = -50.0;
    params.clamp_temperature();
    CHECK(params.tau() == doctest::Approx(0.01));
}
