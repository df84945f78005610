#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "bifrec/errors.hpp"
#include "bifrec/eval.hpp"
#include "bifrec/rng.hpp"

using namespace bifrec;

namespace {

// brute-force reference: full sort of every row/column, membership check
double recall_oracle(const SimilarityMatrix& m,
                     const std::vector<std::pair<long, long>>& truth, std::size_t k,
                     Direction dir) {
    std::map<long, long> gt(truth.begin(), truth.end());
    auto sorted_indices = [](const std::vector<double>& scores) {
        std::vector<std::size_t> idx(scores.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
            return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
        });
        return idx;
    };
    if (dir == Direction::speech2image) {
        std::size_t hits = 0;
        for (std::size_t i = 0; i < m.rows(); ++i) {
            std::vector<double> row(m.cols());
            for (std::size_t j = 0; j < m.cols(); ++j) row[j] = m.at(i, j);
            auto order = sorted_indices(row);
            for (std::size_t r = 0; r < k; ++r)
                if (m.image_ids[order[r]] == gt.at(m.sample_ids[i])) {
                    ++hits;
                    break;
                }
        }
        return double(hits) / double(m.rows());
    }
    std::size_t hits = 0;
    for (std::size_t j = 0; j < m.cols(); ++j) {
        std::vector<double> col(m.rows());
        for (std::size_t i = 0; i < m.rows(); ++i) col[i] = m.at(i, j);
        auto order = sorted_indices(col);
        for (std::size_t r = 0; r < k; ++r)
            if (gt.at(m.sample_ids[order[r]]) == m.image_ids[j]) {
                ++hits;
                break;
            }
    }
    return double(hits) / double(m.cols());
}

SimilarityMatrix random_matrix(RandomStream& rs, std::size_t rows, std::size_t cols,
                               std::vector<std::pair<long, long>>& truth) {
    SimilarityMatrix m;
    for (std::size_t i = 0; i < rows; ++i) m.sample_ids.push_back(static_cast<long>(i));
    for (std::size_t j = 0; j < cols; ++j) m.image_ids.push_back(static_cast<long>(j));
    m.scores.resize(rows * cols);
    for (auto& v : m.scores) v = rs.uniform(-1, 1);
    // ties with positive probability exercise the deterministic tie-break
    for (auto& v : m.scores)
        if (rs.bernoulli(0.05)) v = 0.25;
    truth.clear();
    for (std::size_t i = 0; i < rows; ++i)
        truth.push_back({static_cast<long>(i), static_cast<long>(rs.uniform_index(cols))});
    return m;
}

}  // namespace

TEST_CASE("similarity matrix: hand dot products, internal normalization") {
    std::vector<std::vector<double>> audio = {{1, 0}, {0, 2}, {3, 4}};
    std::vector<std::vector<double>> image = {{2, 0}, {0, 5}};
    SimilarityMatrix m = similarity_matrix(audio, {10, 11, 12}, image, {100, 101});
    CHECK(m.at(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(m.at(0, 1) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(m.at(1, 0) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(m.at(1, 1) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(m.at(2, 0) == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(m.at(2, 1) == doctest::Approx(0.8).epsilon(1e-12));

    // scaling either side changes nothing
    std::vector<std::vector<double>> scaled = {{3, 0}, {0, 6}, {9, 12}};
    SimilarityMatrix ms = similarity_matrix(scaled, {10, 11, 12}, image, {100, 101});
    for (std::size_t i = 0; i < m.scores.size(); ++i)
        CHECK(ms.scores[i] == doctest::Approx(m.scores[i]).epsilon(1e-12));

    for (double v : m.scores) {
        CHECK(v <= 1.0 + 1e-9);
        CHECK(v >= -1.0 - 1e-9);
    }

    CHECK_THROWS_AS(similarity_matrix(audio, {1, 2, 3}, {{1, 2, 3}}, {9}), ShapeError);
}

TEST_CASE("recall_at_k: the worked three-query example") {
    SimilarityMatrix m;
    m.sample_ids = {0, 1, 2};
    m.image_ids = {100, 101};
    m.scores = {0.9, 0.1, 0.2, 0.8, 0.6, 0.5};
    std::vector<std::pair<long, long>> truth = {{0, 100}, {1, 101}, {2, 101}};
    // query 2 retrieves image 100 first, so 2 of 3 hit
    CHECK(recall_at_k(m, truth, 1, Direction::speech2image) == doctest::Approx(2.0 / 3.0));
    CHECK(recall_at_k(m, truth, 2, Direction::speech2image) == doctest::Approx(1.0));

    CHECK_THROWS_AS(recall_at_k(m, truth, 3, Direction::speech2image), UsageError);
    CHECK_THROWS_AS(recall_at_k(m, truth, 0, Direction::speech2image), UsageError);
}

TEST_CASE("recall_at_k: diagonal dominance gives perfect recall both ways") {
    SimilarityMatrix m;
    m.sample_ids = {0, 1, 2};
    m.image_ids = {0, 1, 2};
    m.scores = {0.9, 0.0, 0.1, 0.0, 0.8, 0.1, 0.0, 0.1, 0.7};
    std::vector<std::pair<long, long>> truth = {{0, 0}, {1, 1}, {2, 2}};
    CHECK(recall_at_k(m, truth, 1, Direction::speech2image) == doctest::Approx(1.0));
    CHECK(recall_at_k(m, truth, 1, Direction::image2speech) == doctest::Approx(1.0));
}

TEST_CASE("image2speech multi-answer rule: a lone late caption still counts") {
    // image 100 has five captions; only the fourth ranks top-1 in its column
    SimilarityMatrix m;
    m.sample_ids = {0, 1, 2, 3, 4};
    m.image_ids = {100};
    m.scores = {0.1, 0.2, 0.3, 0.9, 0.05};
    std::vector<std::pair<long, long>> truth;
    for (long s = 0; s < 5; ++s) truth.push_back({s, 100});
    CHECK(recall_at_k(m, truth, 1, Direction::image2speech) == doctest::Approx(1.0));
}

TEST_CASE("recall_at_k equals the brute-force oracle on random matrices") {
    RandomStream rs(606);
    for (int trial = 0; trial < 120; ++trial) {
        std::size_t rows = 1 + rs.uniform_index(20);
        std::size_t cols = 1 + rs.uniform_index(20);
        std::vector<std::pair<long, long>> truth;
        SimilarityMatrix m = random_matrix(rs, rows, cols, truth);
        for (std::size_t k = 1; k <= 10; ++k) {
            if (k <= cols)
                CHECK(recall_at_k(m, truth, k, Direction::speech2image) ==
                      doctest::Approx(recall_oracle(m, truth, k, Direction::speech2image)));
            if (k <= rows)
                CHECK(recall_at_k(m, truth, k, Direction::image2speech) ==
                      doctest::Approx(recall_oracle(m, truth, k, Direction::image2speech)));
        }
    }
}

TEST_CASE("an image's own image2speech hit never degrades when it gains captions") {
    RandomStream rs(707);
    for (int trial = 0; trial < 40; ++trial) {
        std::size_t rows = 3 + rs.uniform_index(10);
        std::size_t cols = 2 + rs.uniform_index(6);
        std::vector<std::pair<long, long>> truth;
        SimilarityMatrix m = random_matrix(rs, rows, cols, truth);

        // isolate image 0: evaluate the single-column matrix before/after
        auto single_column = [&](const SimilarityMatrix& full,
                                 const std::vector<std::pair<long, long>>& gt) {
            SimilarityMatrix one;
            one.sample_ids = full.sample_ids;
            one.image_ids = {full.image_ids[0]};
            for (std::size_t i = 0; i < full.rows(); ++i)
                one.scores.push_back(full.at(i, 0));
            return recall_at_k(one, gt, 1, Direction::image2speech);
        };
        double before = single_column(m, truth);

        SimilarityMatrix extended = m;
        extended.sample_ids.push_back(static_cast<long>(rows));
        for (std::size_t j = 0; j < cols; ++j)
            extended.scores.push_back(rs.uniform(-1, 1));
        auto truth2 = truth;
        truth2.push_back({static_cast<long>(rows), extended.image_ids[0]});
        double after = single_column(extended, truth2);
        CHECK(after >= before - 1e-12);
    }
}

TEST_CASE("top-K sets are invariant to positive scaling of one side") {
    RandomStream rs(808);
    std::vector<std::vector<double>> audio, image;
    for (int i = 0; i < 8; ++i) {
        audio.push_back({rs.uniform(-1, 1), rs.uniform(-1, 1), rs.uniform(-1, 1)});
        image.push_back({rs.uniform(-1, 1), rs.uniform(-1, 1), rs.uniform(-1, 1)});
    }
    std::vector<long> sample_ids(8), image_ids(8);
    std::iota(sample_ids.begin(), sample_ids.end(), 0);
    std::iota(image_ids.begin(), image_ids.end(), 0);
    std::vector<std::pair<long, long>> truth;
    for (long i = 0; i < 8; ++i) truth.push_back({i, i});

    auto scaled = image;
    for (auto& row : scaled)
        for (auto& v : row) v *= 41.7;
    SimilarityMatrix a = similarity_matrix(audio, sample_ids, image, image_ids);
    SimilarityMatrix b = similarity_matrix(audio, sample_ids, scaled, image_ids);
    for (std::size_t k = 1; k <= 8; ++k) {
        CHECK(recall_at_k(a, truth, k, Direction::speech2image) ==
              doctest::Approx(recall_at_k(b, truth, k, Direction::speech2image)));
        CHECK(recall_at_k(a, truth, k, Direction::image2speech) ==
              doctest::Approx(recall_at_k(b, truth, k, Direction::image2speech)));
    }
}

TEST_CASE("logistic fit: threshold outcomes give a negative slope") {
    std::vector<PerSampleOutcome> outcomes;
    RandomStream rs(909);
    for (int i = 0; i < 200; ++i) {
        PerSampleOutcome o;
        o.sample_id = i;
        o.wer = rs.uniform(0.0, 0.6);
        o.hit1 = o.wer < 0.2;
        outcomes.push_back(o);
    }
    WerAnalysis fit = wer_recall_analysis(outcomes);
    CHECK(fit.converged);
    CHECK(fit.slope < 0.0);

    // reproducibility to 1e-10
    WerAnalysis again = wer_recall_analysis(outcomes);
    CHECK(std::fabs(again.slope - fit.slope) < 1e-10);
    CHECK(std::fabs(again.intercept - fit.intercept) < 1e-10);
}

TEST_CASE("logistic fit: coin-flip hits keep the slope small") {
    RandomStream rs(1010);
    int small_slope = 0;
    const int trials = 40;
    for (int t = 0; t < trials; ++t) {
        std::vector<PerSampleOutcome> outcomes;
        for (int i = 0; i < 100; ++i) {
            PerSampleOutcome o;
            o.sample_id = i;
            o.wer = rs.uniform(0.0, 0.8);
            o.hit1 = rs.bernoulli(0.5);
            outcomes.push_back(o);
        }
        WerAnalysis fit = wer_recall_analysis(outcomes);
        if (std::fabs(fit.slope) < 2.0) ++small_slope;
    }
    CHECK(static_cast<double>(small_slope) / trials >= 0.9);
}

TEST_CASE("logistic fit: all hits saturate the intercept, not the slope") {
    std::vector<PerSampleOutcome> outcomes;
    RandomStream rs(1111);
    for (int i = 0; i < 60; ++i) {
        PerSampleOutcome o;
        o.sample_id = i;
        o.wer = rs.uniform(0.0, 0.5);
        o.hit1 = true;
        outcomes.push_back(o);
    }
    WerAnalysis fit = wer_recall_analysis(outcomes);
    CHECK(fit.converged);
    CHECK(fit.intercept > 3.0);
    CHECK(std::fabs(fit.slope) < 0.5);
}

TEST_CASE("logistic fit rejects tiny or degenerate inputs") {
    std::vector<PerSampleOutcome> few(10);
    CHECK_THROWS_AS(wer_recall_analysis(few), UsageError);

    std::vector<PerSampleOutcome> flat;
    for (int i = 0; i < 50; ++i) {
        PerSampleOutcome o;
        o.sample_id = i;
        o.wer = 0.3 + 0.01 * (i % 2);
        o.hit1 = i % 3 == 0;
        flat.push_back(o);
    }
    CHECK_THROWS_AS(wer_recall_analysis(flat), UsageError);
}

TEST_CASE("ser probe machinery: signal, shuffled labels, class floor") {
    EncoderConfig cfg;
    cfg.d_model = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 16;
    cfg.vocab_size_ = vocab_size();
    RandomStream root(4242);
    FrozenEncoderSet frozen;
    frozen.image = init_image_encoder(cfg, root.fork("image"));
    frozen.text = init_text_encoder(cfg, root.fork("text"));
    frozen.audio = init_audio_encoder(cfg, root.fork("audio"));
    set_requires_grad(frozen, false);
    DualChannelParams params = init_params(cfg, ModelMode::e2e_only, std::move(frozen), 11);

    Dataset ds = generate_dataset(DatasetStyle::mood_aware, 60, 3, 313);
    ProbeReport acoustic = ser_probe(params, ds, ProbeFeatures::acoustic, 500);
    CHECK(acoustic.overall_accuracy > 0.5);  // mood offsets are recoverable even untrained
    CHECK(acoustic.per_class_accuracy.size() == kNumMoods);
    CHECK(acoustic.n_test > 0);

    // destroying the labels collapses the probe to chance
    Dataset shuffled = ds;
    RandomStream srs(999);
    for (auto& s : shuffled.samples) s.mood = static_cast<int>(srs.uniform_index(kNumMoods));
    ProbeReport noise = ser_probe(params, shuffled, ProbeFeatures::acoustic, 500);
    CHECK(noise.overall_accuracy < 0.5);
    CHECK(noise.overall_accuracy < acoustic.overall_accuracy);

    Dataset single = ds;
    for (auto& s : single.samples) s.mood = 2;
    CHECK_THROWS_AS(ser_probe(params, single, ProbeFeatures::acoustic, 10), UsageError);
}

TEST_CASE("dataset compatibility checks dims and vocabulary") {
    Dataset ds = generate_dataset(DatasetStyle::scripted, 4, 1, 5);
    EncoderConfig cfg;
    cfg.vocab_size_ = 64;
    std::string why;
    CHECK(dataset_compatible(ds.header, cfg, &why));

    DatasetHeader bad = ds.header;
    bad.patch_dim_ = 99;
    CHECK_FALSE(dataset_compatible(bad, cfg, &why));
    CHECK(why.find("patch_dim") != std::string::npos);

    DatasetHeader badvocab = ds.header;
    badvocab.vocab[3] = "zebra";
    CHECK_FALSE(dataset_compatible(badvocab, cfg, &why));
    CHECK(why.find("vocab") != std::string::npos);
}
