#include "bifrec/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "bifrec/errors.hpp"
#include "bifrec/ops.hpp"
#include "bifrec/threading.hpp"

namespace bifrec {

namespace {

void normalize_rows(std::vector<std::vector<double>>& rows) {
    for (auto& r : rows) {
        double ss = 0.0;
        for (double v : r) ss += v * v;
        double norm = std::sqrt(ss);
        if (norm > 1e-9)
            for (double& v : r) v /= norm;
        else
            std::fill(r.begin(), r.end(), 0.0);
    }
}

}  // namespace

SimilarityMatrix similarity_matrix(const std::vector<std::vector<double>>& audio_embeddings,
                                   const std::vector<long>& sample_ids,
                                   const std::vector<std::vector<double>>& image_embeddings,
                                   const std::vector<long>& image_ids) {
    if (audio_embeddings.size() != sample_ids.size() ||
        image_embeddings.size() != image_ids.size())
        throw ShapeError("similarity_matrix: id lists must match embedding counts");
    if (audio_embeddings.empty() || image_embeddings.empty())
        throw ShapeError("similarity_matrix: empty embedding set");
    std::size_t d = audio_embeddings[0].size();
    for (const auto& e : audio_embeddings)
        if (e.size() != d) throw ShapeError("similarity_matrix: ragged audio embeddings");
    for (const auto& e : image_embeddings)
        if (e.size() != d)
            throw ShapeError("similarity_matrix: width mismatch (" + std::to_string(d) +
                             " vs " + std::to_string(e.size()) + ")");

    auto a = audio_embeddings;
    auto v = image_embeddings;
    normalize_rows(a);
    normalize_rows(v);

    SimilarityMatrix m;
    m.sample_ids = sample_ids;
    m.image_ids = image_ids;
    m.scores.resize(a.size() * v.size());
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < v.size(); ++j) {
            double dot = 0.0;
            for (std::size_t x = 0; x < d; ++x) dot += a[i][x] * v[j][x];
            m.scores[i * v.size() + j] = dot;
        }
    return m;
}

namespace {

// candidate indices ordered by descending score, ties by ascending index
std::vector<std::size_t> ranked(const std::vector<double>& scores) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    return order;
}

}  // namespace

double recall_at_k(const SimilarityMatrix& matrix,
                   const std::vector<std::pair<long, long>>& sample_to_image, std::size_t k,
                   Direction direction) {
    if (k < 1) throw UsageError("recall_at_k: k must be at least 1");
    std::map<long, long> truth(sample_to_image.begin(), sample_to_image.end());

    if (direction == Direction::speech2image) {
        if (k > matrix.cols())
            throw UsageError("recall_at_k: k exceeds the " + std::to_string(matrix.cols()) +
                             " image candidates");
        std::size_t hits = 0;
        for (std::size_t i = 0; i < matrix.rows(); ++i) {
            auto it = truth.find(matrix.sample_ids[i]);
            if (it == truth.end())
                throw UsageError("recall_at_k: sample " + std::to_string(matrix.sample_ids[i]) +
                                 " has no ground-truth image");
            std::vector<double> row(matrix.scores.begin() + i * matrix.cols(),
                                    matrix.scores.begin() + (i + 1) * matrix.cols());
            auto order = ranked(row);
            for (std::size_t r = 0; r < k; ++r)
                if (matrix.image_ids[order[r]] == it->second) {
                    ++hits;
                    break;
                }
        }
        return static_cast<double>(hits) / static_cast<double>(matrix.rows());
    }

    // image2speech: one query per image column, any of its samples counts
    if (k > matrix.rows())
        throw UsageError("recall_at_k: k exceeds the " + std::to_string(matrix.rows()) +
                         " audio candidates");
    std::size_t hits = 0;
    for (std::size_t j = 0; j < matrix.cols(); ++j) {
        std::vector<double> col(matrix.rows());
        for (std::size_t i = 0; i < matrix.rows(); ++i) col[i] = matrix.at(i, j);
        auto order = ranked(col);
        for (std::size_t r = 0; r < k; ++r) {
            auto it = truth.find(matrix.sample_ids[order[r]]);
            if (it != truth.end() && it->second == matrix.image_ids[j]) {
                ++hits;
                break;
            }
        }
    }
    return static_cast<double>(hits) / static_cast<double>(matrix.cols());
}

namespace {

std::vector<double> tensor_row(const Tensor& t) {
    return std::vector<double>(t.data().begin(), t.data().end());
}

// audio-side embedding for one sample under the params' mode
std::vector<double> embed_audio_side(const PairedSample& s, DualChannelParams& params,
                                     TextSource text_source, ZaCache& za) {
    NoGradGuard ng;
    ModelMode mode = params.mode;
    bool prompted = mode_uses_prompts(mode);

    Tensor f_t, f_a;
    if (mode_uses_text(mode)) {
        const std::vector<int>& tokens =
            text_source == TextSource::ground_truth ? s.caption : s.transcription;
        TokenEmbedding emb = embed_tokens(tokens, params.frozen.text, params.config);
        Tensor seq = prompted ? prepend_text_prompts(params.prompts, emb.seq) : emb.seq;
        f_t = text_encode(seq, params.frozen.text, params.config);
    }
    if (mode_uses_e2e(mode)) {
        Tensor z_a = za.get(s);
        Tensor z_hat = prompted ? prepend_audio_prompts(params.prompts, z_a) : z_a;
        f_a = acoustic_encode(z_hat, params.e2e, params.config);
    }
    switch (mode) {
        case ModelMode::full: return tensor_row(fuse(f_a, f_t));
        case ModelMode::pipeline_zero_shot:
        case ModelMode::pipeline_prompted: return tensor_row(f_t);
        case ModelMode::e2e_only: return tensor_row(f_a);
    }
    throw UsageError("bad mode enum");
}

}  // namespace

RetrievalReport evaluate_retrieval(DualChannelParams& params, const Dataset& dataset,
                                   bool train_split, TextSource text_source,
                                   ZaCache* za_cache) {
    if (text_source == TextSource::ground_truth && params.mode == ModelMode::e2e_only)
        throw UsageError("evaluate_retrieval: e2e_only has no text channel for ground_truth");
    auto indices = dataset.split_indices(train_split);
    if (indices.empty()) throw UsageError("evaluate_retrieval: empty split");

    bool needs_asr = mode_uses_text(params.mode) && text_source == TextSource::asr;
    std::vector<std::size_t> usable;
    long dropped = 0;
    for (std::size_t idx : indices) {
        if (needs_asr && !dataset.samples[idx].has_transcription) {
            ++dropped;
            continue;
        }
        usable.push_back(idx);
    }
    if (usable.empty()) throw UsageError("evaluate_retrieval: every sample was dropped");

    ZaCache local(&params.frozen, params.config);
    ZaCache& za = za_cache ? *za_cache : local;
    if (mode_uses_e2e(params.mode))  // serial prefill keeps the cache race-free
        for (std::size_t idx : usable) za.get(dataset.samples[idx]);

    std::optional<Tensor> image_prompts;
    {
        NoGradGuard ng;
        if (mode_uses_prompts(params.mode))
            image_prompts = project_image_prompts(params.prompts, params.prompt_proj_w,
                                                  params.prompt_proj_b);
    }

    // unique images in first-appearance order
    std::vector<long> image_ids;
    std::vector<const PairedSample*> image_rep;
    {
        std::set<long> seen;
        for (std::size_t idx : indices) {
            const auto& s = dataset.samples[idx];
            if (seen.insert(s.image_id).second) {
                image_ids.push_back(s.image_id);
                image_rep.push_back(&s);
            }
        }
    }

    std::vector<std::vector<double>> audio_emb(usable.size());
    std::vector<long> sample_ids(usable.size());
    std::vector<std::pair<long, long>> truth(usable.size());
    parallel_for(usable.size(), [&](std::size_t i) {
        const auto& s = dataset.samples[usable[i]];
        sample_ids[i] = s.sample_id;
        truth[i] = {s.sample_id, s.image_id};
        audio_emb[i] = embed_audio_side(s, params, text_source, za);
    });

    std::vector<std::vector<double>> image_emb(image_ids.size());
    parallel_for(image_ids.size(), [&](std::size_t j) {
        NoGradGuard ng;
        image_emb[j] = tensor_row(
            image_encode(image_rep[j]->image, params.frozen.image, params.config, image_prompts));
    });

    SimilarityMatrix matrix = similarity_matrix(audio_emb, sample_ids, image_emb, image_ids);

    RetrievalReport report;
    report.mode = mode_name(params.mode);
    report.text_source = text_source == TextSource::asr ? "asr" : "ground_truth";
    report.n_queries_s2i = static_cast<long>(usable.size());
    report.n_queries_i2s = static_cast<long>(image_ids.size());
    report.n_dropped = dropped;
    auto capped = [&](std::size_t k, std::size_t limit) { return std::min(k, limit); };
    report.s2i_r1 = recall_at_k(matrix, truth, capped(1, matrix.cols()), Direction::speech2image);
    report.s2i_r5 = recall_at_k(matrix, truth, capped(5, matrix.cols()), Direction::speech2image);
    report.s2i_r10 =
        recall_at_k(matrix, truth, capped(10, matrix.cols()), Direction::speech2image);
    report.i2s_r1 = recall_at_k(matrix, truth, capped(1, matrix.rows()), Direction::image2speech);
    report.i2s_r5 = recall_at_k(matrix, truth, capped(5, matrix.rows()), Direction::image2speech);
    report.i2s_r10 =
        recall_at_k(matrix, truth, capped(10, matrix.rows()), Direction::image2speech);

    // per-sample hit@1 outcomes feed the WER analysis
    std::map<long, std::size_t> col_of;
    for (std::size_t j = 0; j < image_ids.size(); ++j) col_of[image_ids[j]] = j;
    for (std::size_t i = 0; i < usable.size(); ++i) {
        const auto& s = dataset.samples[usable[i]];
        std::vector<double> row(matrix.scores.begin() + i * matrix.cols(),
                                matrix.scores.begin() + (i + 1) * matrix.cols());
        auto order = ranked(row);
        PerSampleOutcome o;
        o.sample_id = s.sample_id;
        o.wer = s.has_transcription ? s.realized_wer : 1.0;
        o.hit1 = matrix.image_ids[order[0]] == s.image_id;
        report.per_sample.push_back(o);
    }
    return report;
}

// ---------------------------------------------------------------------------
// SER probe
// ---------------------------------------------------------------------------

ProbeReport ser_probe(DualChannelParams& params, const Dataset& dataset, ProbeFeatures features,
                      long train_steps) {
    auto collect = [&](bool train_split, std::vector<std::vector<double>>& xs,
                       std::vector<int>& ys) {
        auto indices = dataset.split_indices(train_split);
        ZaCache za(&params.frozen, params.config);
        bool prompted = mode_uses_prompts(params.mode);
        for (std::size_t idx : indices) {
            const auto& s = dataset.samples[idx];
            NoGradGuard ng;
            if (features == ProbeFeatures::acoustic) {
                Tensor z_a = za.get(s);
                Tensor z_hat = prompted ? prepend_audio_prompts(params.prompts, z_a) : z_a;
                xs.push_back(tensor_row(acoustic_encode(z_hat, params.e2e, params.config)));
            } else {
                // ground-truth captions: the pipeline channel sees text only
                TokenEmbedding emb = embed_tokens(s.caption, params.frozen.text, params.config);
                Tensor seq = prompted ? prepend_text_prompts(params.prompts, emb.seq) : emb.seq;
                xs.push_back(tensor_row(text_encode(seq, params.frozen.text, params.config)));
            }
            ys.push_back(s.mood);
        }
    };

    std::vector<std::vector<double>> x_train, x_test;
    std::vector<int> y_train, y_test;
    collect(true, x_train, y_train);
    collect(false, x_test, y_test);
    if (x_train.empty() || x_test.empty()) throw UsageError("ser_probe: empty split");
    {
        std::set<int> classes(y_train.begin(), y_train.end());
        if (classes.size() < 2)
            throw UsageError("ser_probe: need at least 2 mood classes in the train split");
    }

    std::size_t d = x_train[0].size();
    std::size_t n = x_train.size();
    std::vector<double> flat;
    flat.reserve(n * d);
    for (const auto& row : x_train) flat.insert(flat.end(), row.begin(), row.end());
    Tensor features_t = Tensor::from_data({n, d}, std::move(flat));
    std::vector<double> mask_data(n * kNumMoods, 0.0);
    for (std::size_t i = 0; i < n; ++i) mask_data[i * kNumMoods + y_train[i]] = 1.0;
    Tensor label_mask = Tensor::from_data({n, kNumMoods}, std::move(mask_data));

    Tensor w = Tensor::zeros({d, kNumMoods}).set_requires_grad(true);
    Tensor b = Tensor::zeros({kNumMoods}).set_requires_grad(true);
    std::vector<Tensor> head = {w, b};
    AdamState state;
    AdamConfig adam;
    adam.weight_decay = 0.0;
    for (long step = 0; step < train_steps; ++step) {
        Tensor logits = add(matmul(features_t, w), b);
        Tensor loss = scalar_mul(sum(mul(vlog(softmax(logits, 1)), label_mask)),
                                 -1.0 / static_cast<double>(n));
        if (!std::isfinite(loss.item())) throw NumericError("ser_probe: non-finite loss");
        for (auto& t : head) t.zero_grad();
        backward(loss);
        adam_step(head, state, 0.05, adam);
    }

    ProbeReport report;
    report.feature_source = features == ProbeFeatures::acoustic ? "acoustic" : "text";
    report.train_steps = train_steps;
    report.n_train = static_cast<long>(n);
    report.n_test = static_cast<long>(x_test.size());
    report.per_class_accuracy.assign(kNumMoods, 0.0);
    report.per_class_counts.assign(kNumMoods, 0);
    long correct = 0;
    std::vector<long> class_correct(kNumMoods, 0);
    for (std::size_t i = 0; i < x_test.size(); ++i) {
        int best = 0;
        double best_score = -HUGE_VAL;
        for (std::size_t c = 0; c < kNumMoods; ++c) {
            double score = b.data()[c];
            for (std::size_t j = 0; j < d; ++j) score += x_test[i][j] * w.data()[j * kNumMoods + c];
            if (score > best_score) {
                best_score = score;
                best = static_cast<int>(c);
            }
        }
        report.per_class_counts[y_test[i]] += 1;
        if (best == y_test[i]) {
            ++correct;
            class_correct[y_test[i]] += 1;
        }
    }
    report.overall_accuracy = static_cast<double>(correct) / static_cast<double>(x_test.size());
    for (std::size_t c = 0; c < kNumMoods; ++c)
        report.per_class_accuracy[c] =
            report.per_class_counts[c] > 0
                ? static_cast<double>(class_correct[c]) / report.per_class_counts[c]
                : 0.0;
    return report;
}

// ---------------------------------------------------------------------------
// Logistic regression on (wer, hit@1)
// ---------------------------------------------------------------------------

WerAnalysis wer_recall_analysis(const std::vector<PerSampleOutcome>& outcomes) {
    if (outcomes.size() < 30)
        throw UsageError("wer_recall_analysis: need at least 30 samples, got " +
                         std::to_string(outcomes.size()));
    double lo = 1.0, hi = 0.0;
    for (const auto& o : outcomes) {
        lo = std::min(lo, o.wer);
        hi = std::max(hi, o.wer);
    }
    if (hi - lo < 0.2)
        throw UsageError("wer_recall_analysis: WER spread " + std::to_string(hi - lo) +
                         " below the required 0.2");

    WerAnalysis fit;
    fit.n_samples = static_cast<long>(outcomes.size());
    const double lambda = fit.slope_l2;
    auto nll = [&](double a, double b) {
        double acc = 0.0;
        for (const auto& o : outcomes) {
            double z = a + b * o.wer;
            // log(1 + exp(z)) computed stably
            double softplus = z > 30.0 ? z : std::log1p(std::exp(z));
            acc += softplus - (o.hit1 ? z : 0.0);
        }
        return acc + 0.5 * lambda * b * b;
    };
    auto grad = [&](double a, double b, double& ga, double& gb) {
        ga = 0.0;
        gb = 0.0;
        for (const auto& o : outcomes) {
            double p = 1.0 / (1.0 + std::exp(-(a + b * o.wer)));
            double r = p - (o.hit1 ? 1.0 : 0.0);
            ga += r;
            gb += r * o.wer;
        }
        gb += lambda * b;
    };

    double a = 0.0, b = 0.0;
    double step = 1.0 / static_cast<double>(outcomes.size());
    double f = nll(a, b);
    for (long iter = 0; iter < 500000; ++iter) {
        double ga, gb;
        grad(a, b, ga, gb);
        fit.grad_norm = std::sqrt(ga * ga + gb * gb);
        if (fit.grad_norm < 1e-6) {
            fit.converged = true;
            break;
        }
        double na = a - step * ga, nb = b - step * gb;
        double nf = nll(na, nb);
        if (nf < f) {
            a = na;
            b = nb;
            f = nf;
            step *= 1.25;
        } else {
            step *= 0.5;
            if (step < 1e-18) break;
        }
    }
    fit.intercept = a;
    fit.slope = b;
    return fit;
}

bool dataset_compatible(const DatasetHeader& header, const EncoderConfig& cfg,
                        std::string* why) {
    auto fail = [&](const std::string& reason) {
        if (why) *why = reason;
        return false;
    };
    if (header.n_patches != cfg.n_patches) return fail("n_patches mismatch");
    if (header.patch_dim_ != cfg.patch_dim_) return fail("patch_dim mismatch");
    if (header.frame_dim != cfg.frame_dim) return fail("frame_dim mismatch");
    if (header.vocab.size() > cfg.vocab_size_) return fail("vocabulary exceeds model table");
    if (header.vocab != vocabulary()) return fail("vocabulary mismatch");
    return true;
}

}  // namespace bifrec
