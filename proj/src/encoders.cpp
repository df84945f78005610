#include "bifrec/encoders.hpp"

#include <cmath>

#include "bifrec/errors.hpp"
#include "bifrec/ops.hpp"

namespace bifrec {

void EncoderConfig::validate() const {
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
        throw UsageError("encoder config: d_model must be a positive multiple of n_heads");
    if (n_layers == 0 || d_ff == 0) throw UsageError("encoder config: empty stack");
    if (max_text_len <= prompt_len)
        throw UsageError("encoder config: max_text_len must exceed prompt_len");
    if (max_audio_len == 0 || n_patches == 0 || patch_dim_ == 0 || frame_dim == 0)
        throw UsageError("encoder config: zero extent");
    if (vocab_size_ < vocab_size())
        throw UsageError("encoder config: vocab_size below the generator vocabulary (" +
                         std::to_string(vocab_size()) + ")");
}

// ---------------------------------------------------------------------------
// Weight plumbing
// ---------------------------------------------------------------------------

void visit_tensors(LayerWeights& w, const std::string& p, const TensorVisitor& fn) {
    fn(p + ".ln1_g", w.ln1_g);
    fn(p + ".ln1_b", w.ln1_b);
    fn(p + ".wq", w.wq);
    fn(p + ".bq", w.bq);
    fn(p + ".wk", w.wk);
    fn(p + ".bk", w.bk);
    fn(p + ".wv", w.wv);
    fn(p + ".bv", w.bv);
    fn(p + ".wo", w.wo);
    fn(p + ".bo", w.bo);
    fn(p + ".ln2_g", w.ln2_g);
    fn(p + ".ln2_b", w.ln2_b);
    fn(p + ".w1", w.w1);
    fn(p + ".b1", w.b1);
    fn(p + ".w2", w.w2);
    fn(p + ".b2", w.b2);
}

void visit_tensors(TransformerStack& s, const std::string& p, const TensorVisitor& fn) {
    for (std::size_t i = 0; i < s.layers.size(); ++i)
        visit_tensors(s.layers[i], p + ".layer" + std::to_string(i), fn);
}

void visit_tensors(ImageEncoderWeights& w, const std::string& p, const TensorVisitor& fn) {
    fn(p + ".patch_w", w.patch_w);
    fn(p + ".patch_b", w.patch_b);
    fn(p + ".pos", w.pos);
    fn(p + ".cls", w.cls);
    visit_tensors(w.stack, p, fn);
}

void visit_tensors(TextEncoderWeights& w, const std::string& p, const TensorVisitor& fn) {
    fn(p + ".token_table", w.token_table);
    fn(p + ".pos", w.pos);
    fn(p + ".cls", w.cls);
    visit_tensors(w.stack, p, fn);
}

void visit_tensors(AudioEncoderWeights& w, const std::string& p, const TensorVisitor& fn) {
    fn(p + ".frame_w", w.frame_w);
    fn(p + ".frame_b", w.frame_b);
    fn(p + ".pos", w.pos);
    visit_tensors(w.stack, p, fn);
}

void visit_tensors(FrozenEncoderSet& s, const TensorVisitor& fn) {
    visit_tensors(s.image, "image", fn);
    visit_tensors(s.text, "text", fn);
    visit_tensors(s.audio, "audio", fn);
}

void visit_tensors(E2eWeights& w, const std::string& p, const TensorVisitor& fn) {
    fn(p + ".cls", w.cls);
    visit_tensors(w.layer, p + ".layer0", fn);
}

LayerWeights init_layer(const EncoderConfig& cfg, RandomStream rs) {
    double wstd = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
    double ffstd = 1.0 / std::sqrt(static_cast<double>(cfg.d_ff));
    LayerWeights w;
    w.ln1_g = Tensor::full({cfg.d_model}, 1.0);
    w.ln1_b = Tensor::zeros({cfg.d_model});
    RandomStream r1 = rs.fork("attn");
    w.wq = Tensor::randn({cfg.d_model, cfg.d_model}, r1, wstd);
    w.bq = Tensor::zeros({cfg.d_model});
    w.wk = Tensor::randn({cfg.d_model, cfg.d_model}, r1, wstd);
    w.bk = Tensor::zeros({cfg.d_model});
    w.wv = Tensor::randn({cfg.d_model, cfg.d_model}, r1, wstd);
    w.bv = Tensor::zeros({cfg.d_model});
    w.wo = Tensor::randn({cfg.d_model, cfg.d_model}, r1, wstd);
    w.bo = Tensor::zeros({cfg.d_model});
    w.ln2_g = Tensor::full({cfg.d_model}, 1.0);
    w.ln2_b = Tensor::zeros({cfg.d_model});
    RandomStream r2 = rs.fork("ffn");
    w.w1 = Tensor::randn({cfg.d_model, cfg.d_ff}, r2, wstd);
    w.b1 = Tensor::zeros({cfg.d_ff});
    w.w2 = Tensor::randn({cfg.d_ff, cfg.d_model}, r2, ffstd);
    w.b2 = Tensor::zeros({cfg.d_model});
    return w;
}

namespace {

TransformerStack init_stack(const EncoderConfig& cfg, RandomStream rs) {
    TransformerStack s;
    for (std::size_t i = 0; i < cfg.n_layers; ++i)
        s.layers.push_back(init_layer(cfg, rs.fork(i)));
    return s;
}

}  // namespace

ImageEncoderWeights init_image_encoder(const EncoderConfig& cfg, RandomStream rs) {
    ImageEncoderWeights w;
    RandomStream r = rs.fork("embed");
    w.patch_w = Tensor::randn({cfg.patch_dim_, cfg.d_model}, r,
                              1.0 / std::sqrt(static_cast<double>(cfg.patch_dim_)));
    w.patch_b = Tensor::zeros({cfg.d_model});
    w.pos = Tensor::randn({cfg.n_patches, cfg.d_model}, r, 0.02);
    w.cls = Tensor::randn({1, cfg.d_model}, r, 0.02);
    w.stack = init_stack(cfg, rs.fork("stack"));
    return w;
}

TextEncoderWeights init_text_encoder(const EncoderConfig& cfg, RandomStream rs) {
    TextEncoderWeights w;
    RandomStream r = rs.fork("embed");
    w.token_table = Tensor::randn({cfg.vocab_size_, cfg.d_model}, r, 0.02);
    w.pos = Tensor::randn({cfg.max_text_len, cfg.d_model}, r, 0.02);
    w.cls = Tensor::randn({1, cfg.d_model}, r, 0.02);
    w.stack = init_stack(cfg, rs.fork("stack"));
    return w;
}

AudioEncoderWeights init_audio_encoder(const EncoderConfig& cfg, RandomStream rs) {
    AudioEncoderWeights w;
    RandomStream r = rs.fork("embed");
    w.frame_w = Tensor::randn({cfg.frame_dim, cfg.d_model}, r,
                              1.0 / std::sqrt(static_cast<double>(cfg.frame_dim)));
    w.frame_b = Tensor::zeros({cfg.d_model});
    // this encoder is never trained, so positions get a visible scale
    w.pos = Tensor::randn({cfg.max_audio_len, cfg.d_model}, r, 0.1);
    w.stack = init_stack(cfg, rs.fork("stack"));
    return w;
}

E2eWeights init_e2e(const EncoderConfig& cfg, RandomStream rs) {
    E2eWeights w;
    RandomStream r = rs.fork("cls");
    w.cls = Tensor::randn({1, cfg.d_model}, r, 0.02);
    w.layer = init_layer(cfg, rs.fork("layer"));
    return w;
}

void set_requires_grad(FrozenEncoderSet& set, bool rg) {
    visit_tensors(set, [rg](const std::string&, Tensor& t) { t.set_requires_grad(rg); });
}

// ---------------------------------------------------------------------------
// Forward pieces
// ---------------------------------------------------------------------------

namespace {

Tensor affine_norm(const Tensor& x, const Tensor& g, const Tensor& b) {
    return add(mul(layer_norm(x), g), b);
}

}  // namespace

Tensor transformer_layer(const Tensor& x, const LayerWeights& w, std::size_t n_heads) {
    std::size_t d = x.extent(1);
    std::size_t hd = d / n_heads;
    Tensor h = affine_norm(x, w.ln1_g, w.ln1_b);
    Tensor q = add(matmul(h, w.wq), w.bq);
    Tensor k = add(matmul(h, w.wk), w.bk);
    Tensor v = add(matmul(h, w.wv), w.bv);
    std::vector<Tensor> heads;
    double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    for (std::size_t i = 0; i < n_heads; ++i) {
        Tensor qh = slice(q, 1, i * hd, (i + 1) * hd);
        Tensor kh = slice(k, 1, i * hd, (i + 1) * hd);
        Tensor vh = slice(v, 1, i * hd, (i + 1) * hd);
        Tensor attn = softmax(scalar_mul(matmul(qh, transpose(kh)), scale), 1);
        heads.push_back(matmul(attn, vh));
    }
    Tensor ctx = n_heads == 1 ? heads[0] : concat(heads, 1);
    Tensor y = add(x, add(matmul(ctx, w.wo), w.bo));
    Tensor h2 = affine_norm(y, w.ln2_g, w.ln2_b);
    Tensor ffn = add(matmul(gelu(add(matmul(h2, w.w1), w.b1)), w.w2), w.b2);
    return add(y, ffn);
}

Tensor transformer_encode(const Tensor& seq, const TransformerStack& stack,
                          const EncoderConfig& cfg, std::size_t max_len) {
    if (seq.rank() != 2 || seq.extent(1) != cfg.d_model)
        throw ShapeError("transformer_encode: expected (L, d_model), got " +
                         shape_str(seq.shape()));
    if (seq.extent(0) > max_len)
        throw ShapeError("transformer_encode: sequence length " +
                         std::to_string(seq.extent(0)) + " exceeds budget " +
                         std::to_string(max_len));
    Tensor x = seq;
    for (const auto& layer : stack.layers) x = transformer_layer(x, layer, cfg.n_heads);
    return x;
}

Tensor pool_sequence(const Tensor& seq) {
    if (seq.rank() != 2 || seq.extent(0) == 0)
        throw ShapeError("pool_sequence: empty sequence");
    return slice(seq, 0, 0, 1);
}

Tensor embed_patches(const std::vector<double>& image, const ImageEncoderWeights& w,
                     const EncoderConfig& cfg) {
    if (image.size() != cfg.n_patches * cfg.patch_dim_)
        throw ShapeError("embed_patches: expected " +
                         std::to_string(cfg.n_patches * cfg.patch_dim_) + " features, got " +
                         std::to_string(image.size()));
    Tensor cells = Tensor::from_data({cfg.n_patches, cfg.patch_dim_}, image);
    Tensor projected = add(matmul(cells, w.patch_w), w.patch_b);
    return add(projected, slice(w.pos, 0, 0, cfg.n_patches));
}

TokenEmbedding embed_tokens(const std::vector<int>& tokens, const TextEncoderWeights& w,
                            const EncoderConfig& cfg) {
    TokenEmbedding out;
    std::vector<int> ids = tokens;
    if (ids.empty()) ids.push_back(kBosToken);
    if (ids.size() > cfg.text_budget()) {
        ids.resize(cfg.text_budget());  // keep the prefix
        out.truncated = true;
    }
    Tensor looked_up = embedding_lookup(w.token_table, ids);
    out.seq = add(looked_up, slice(w.pos, 0, 0, ids.size()));
    return out;
}

Tensor image_encode(const std::vector<double>& image, const ImageEncoderWeights& w,
                    const EncoderConfig& cfg, const std::optional<Tensor>& image_prompts) {
    Tensor patches = embed_patches(image, w, cfg);
    std::vector<Tensor> parts = {w.cls};
    if (image_prompts) {
        if (image_prompts->rank() != 2 || image_prompts->extent(1) != cfg.d_model)
            throw ShapeError("image_encode: prompt width mismatch " +
                             shape_str(image_prompts->shape()));
        parts.push_back(*image_prompts);
    }
    parts.push_back(patches);
    Tensor seq = concat(parts, 0);
    return pool_sequence(
        transformer_encode(seq, w.stack, cfg, 1 + cfg.prompt_len + cfg.n_patches));
}

Tensor text_encode(const Tensor& embedded_tokens, const TextEncoderWeights& w,
                   const EncoderConfig& cfg) {
    Tensor seq = concat({w.cls, embedded_tokens}, 0);
    return pool_sequence(transformer_encode(seq, w.stack, cfg, 1 + cfg.max_text_len));
}

Tensor audio_featurize(const std::vector<double>& frames, std::size_t n_frames,
                       const AudioEncoderWeights& w, const EncoderConfig& cfg) {
    if (n_frames == 0) throw ShapeError("audio_featurize: empty clip");
    if (frames.size() != n_frames * cfg.frame_dim)
        throw ShapeError("audio_featurize: frame buffer does not match frame count");
    if (n_frames > cfg.max_audio_len)
        throw ShapeError("audio_featurize: clip of " + std::to_string(n_frames) +
                         " frames exceeds max_audio_len " + std::to_string(cfg.max_audio_len));
    Tensor f = Tensor::from_data({n_frames, cfg.frame_dim}, frames);
    return add(add(matmul(f, w.frame_w), w.frame_b), slice(w.pos, 0, 0, n_frames));
}

Tensor whisper_encode_standin(const Tensor& e_a, const AudioEncoderWeights& w,
                              const EncoderConfig& cfg) {
    return transformer_encode(e_a, w.stack, cfg, cfg.max_audio_len);
}

Tensor acoustic_encode(const Tensor& z_hat, const E2eWeights& e2e, const EncoderConfig& cfg) {
    Tensor seq = concat({e2e.cls, z_hat}, 0);
    Tensor encoded = transformer_layer(seq, e2e.layer, cfg.n_heads);
    return pool_sequence(encoded);
}

// ---------------------------------------------------------------------------
// ASR stand-in
// ---------------------------------------------------------------------------

void AsrConfig::validate() const {
    auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!in_unit(target_wer) || !in_unit(drop_filler_prob) || !in_unit(crash_prob) ||
        wer_jitter < 0.0)
        throw UsageError("asr config: probabilities must lie in [0, 1]");
    if (target_wer - wer_jitter < 0.0 || target_wer + wer_jitter > 1.0)
        throw UsageError("asr config: target_wer +/- wer_jitter must stay within [0, 1]");
}

AsrOutcome asr_decode_standin(const PairedSample& sample, const AsrConfig& cfg,
                              RandomStream stream) {
    cfg.validate();
    AsrOutcome out;
    if (stream.bernoulli(cfg.crash_prob)) {
        out.crashed = true;
        return out;
    }
    std::vector<int> tokens;
    for (int tok : sample.caption) {
        if (is_filler_token(tok) && stream.bernoulli(cfg.drop_filler_prob)) continue;
        tokens.push_back(tok);
    }
    double target = cfg.wer_jitter > 0.0
                        ? stream.uniform(cfg.target_wer - cfg.wer_jitter,
                                         cfg.target_wer + cfg.wer_jitter)
                        : cfg.target_wer;
    out.transcription = corrupt_transcript(tokens, target, stream);
    out.realized_wer = compute_wer(sample.caption, out.transcription);
    return out;
}

void resolve_asr(Dataset& dataset, const AsrConfig& cfg, uint64_t seed) {
    RandomStream root = RandomStream(seed).fork("asr");
    for (auto& s : dataset.samples) {
        AsrOutcome o =
            asr_decode_standin(s, cfg, root.fork(static_cast<uint64_t>(s.sample_id)));
        s.has_transcription = !o.crashed;
        s.transcription = std::move(o.transcription);
        s.realized_wer = o.realized_wer;
    }
}

}  // namespace bifrec
