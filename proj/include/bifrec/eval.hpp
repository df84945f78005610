#pragma once

#include <string>
#include <vector>

#include "bifrec/model.hpp"

namespace bifrec {

// ---------------------------------------------------------------------------
// Similarity and recall
// ---------------------------------------------------------------------------

// Cosine scores between audio-side and image-side embeddings; rows are
// audio queries (sample ids), columns unique images. Inputs are normalized
// here, so entries live in [-1, 1].
struct SimilarityMatrix {
    std::vector<long> sample_ids;  // rows
    std::vector<long> image_ids;   // columns
    std::vector<double> scores;    // rows x cols, row-major

    std::size_t rows() const { return sample_ids.size(); }
    std::size_t cols() const { return image_ids.size(); }
    double at(std::size_t i, std::size_t j) const { return scores[i * cols() + j]; }
};

SimilarityMatrix similarity_matrix(const std::vector<std::vector<double>>& audio_embeddings,
                                   const std::vector<long>& sample_ids,
                                   const std::vector<std::vector<double>>& image_embeddings,
                                   const std::vector<long>& image_ids);

enum class Direction { speech2image, image2speech };

// Top-K recall with deterministic ties (ascending candidate index). For
// image2speech each image is one query and any of its caption samples in
// the top K counts.
double recall_at_k(const SimilarityMatrix& matrix,
                   const std::vector<std::pair<long, long>>& sample_to_image, std::size_t k,
                   Direction direction);

// ---------------------------------------------------------------------------
// Retrieval evaluation
// ---------------------------------------------------------------------------

struct PerSampleOutcome {
    long sample_id = 0;
    double wer = 0.0;
    bool hit1 = false;
};

struct RetrievalReport {
    double s2i_r1 = 0, s2i_r5 = 0, s2i_r10 = 0;
    double i2s_r1 = 0, i2s_r5 = 0, i2s_r10 = 0;
    long n_queries_s2i = 0;
    long n_queries_i2s = 0;
    long n_dropped = 0;
    std::string mode;
    std::string text_source;
    std::vector<PerSampleOutcome> per_sample;  // speech2image outcomes
};

// Inference-mode evaluation over one split. With text_source == asr,
// crashed samples are dropped and counted; K above the candidate count
// saturates at full recall.
RetrievalReport evaluate_retrieval(DualChannelParams& params, const Dataset& dataset,
                                   bool train_split, TextSource text_source,
                                   ZaCache* za_cache = nullptr);

// ---------------------------------------------------------------------------
// SER probe
// ---------------------------------------------------------------------------

enum class ProbeFeatures { acoustic, text };

struct ProbeReport {
    double overall_accuracy = 0.0;
    std::vector<double> per_class_accuracy;  // kNumMoods entries
    std::vector<long> per_class_counts;
    std::string feature_source;
    long train_steps = 0;
    long n_train = 0;
    long n_test = 0;
};

// Trains a linear head on frozen features from the train split, reports
// held-out accuracy. The text variant is the negative control: captions
// carry no mood, so held-out accuracy sits at chance.
ProbeReport ser_probe(DualChannelParams& params, const Dataset& dataset, ProbeFeatures features,
                      long train_steps = 400);

// ---------------------------------------------------------------------------
// WER / recall logistic regression
// ---------------------------------------------------------------------------

struct WerAnalysis {
    double intercept = 0.0;
    double slope = 0.0;
    long n_samples = 0;
    double slope_l2 = 1e-3;
    double grad_norm = 0.0;
    bool converged = false;
};

// Fits p(hit@1 | wer) = sigmoid(a + b * wer) by regularized maximum
// likelihood (L2 on the slope only), full-batch gradient descent until the
// gradient norm drops below 1e-6.
WerAnalysis wer_recall_analysis(const std::vector<PerSampleOutcome>& outcomes);

// ---------------------------------------------------------------------------
// Cross-dataset compatibility
// ---------------------------------------------------------------------------

bool dataset_compatible(const DatasetHeader& header, const EncoderConfig& cfg,
                        std::string* why = nullptr);

}  // namespace bifrec
