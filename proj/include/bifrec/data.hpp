#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bifrec/rng.hpp"

namespace bifrec {

// ---------------------------------------------------------------------------
// Vocabulary
//
// One fixed symbolic vocabulary shared by every dataset: a begin token,
// content words (objects, colors, cell positions, connectives) and filler
// (disfluency) tokens. Background tints have no word on purpose: they exist
// only in the image channel.
// ---------------------------------------------------------------------------

inline constexpr int kBosToken = 0;
inline constexpr std::size_t kNumObjects = 8;
inline constexpr std::size_t kNumColors = 4;
inline constexpr std::size_t kNumCells = 16;
inline constexpr std::size_t kNumMoods = 4;
inline constexpr std::size_t kFrameDim = 16;
inline constexpr std::size_t kFramesPerToken = 3;
inline constexpr double kMoodOffsetNorm = 0.5;
inline constexpr double kSpeakerJitterStd = 0.05;

const std::vector<std::string>& vocabulary();      // fixed word list
std::size_t vocab_size();                          // == vocabulary().size()
int object_token(std::size_t object_id);           // 0..7
int color_token(std::size_t color_id);             // 0..3
int cell_token(std::size_t cell_id);               // 0..15
bool is_filler_token(int token);
const std::vector<int>& filler_tokens();
const std::vector<int>& content_tokens();          // substitution/insert pool
const std::vector<std::string>& mood_names();      // neutral happy sad angry

// ---------------------------------------------------------------------------
// Scenes and samples
// ---------------------------------------------------------------------------

struct SceneCell {
    int object_id = -1;  // -1 = empty
    int color_id = -1;
};

struct Scene {
    std::vector<SceneCell> cells;  // kNumCells entries
    int tint_id = -1;              // background tint, mood-aware style only
    std::size_t occupied() const;
};

enum class DatasetStyle { scripted, unscripted, mood_aware };

std::string style_name(DatasetStyle style);
DatasetStyle parse_style(const std::string& name);

struct PairedSample {
    long sample_id = 0;
    long image_id = 0;
    std::vector<double> image;    // n_patches * patch_dim, row-major
    std::vector<int> caption;     // ground-truth token ids
    std::vector<double> audio;    // n_frames * kFrameDim, row-major
    std::size_t n_frames = 0;
    int mood = 0;

    // ASR outcome, resolved at run time; present together or not at all.
    bool has_transcription = false;
    std::vector<int> transcription;
    double realized_wer = 0.0;
};

std::size_t patch_dim();  // object one-hot + color one-hot + tint one-hot

struct DatasetHeader {
    int format_version = 1;
    DatasetStyle style = DatasetStyle::scripted;
    uint64_t seed = 0;
    long n_images = 0;
    long captions_per_image = 0;
    std::size_t n_patches = kNumCells;
    std::size_t patch_dim_ = 0;
    std::size_t frame_dim = kFrameDim;
    std::vector<std::string> vocab;
    std::vector<long> train_image_ids;
    std::vector<long> test_image_ids;
};

struct Dataset {
    DatasetHeader header;
    std::vector<PairedSample> samples;

    std::vector<std::size_t> split_indices(bool train) const;
    bool is_train_image(long image_id) const;
};

// In mood-aware datasets images come in confusable pairs (2k, 2k+1) that
// differ only in tint; captions within a pair are token-identical.
long confusable_twin(long image_id);

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

// Deterministic in (style, n_images, captions_per_image, seed). Splits
// 80/20 by image id (pairs stay together in mood-aware style).
Dataset generate_dataset(DatasetStyle style, long n_images, long captions_per_image,
                         uint64_t seed);

std::vector<double> scene_features(const Scene& scene);
std::vector<int> compose_caption(const Scene& scene, DatasetStyle style, RandomStream stream);
std::vector<double> synthesize_audio(const std::vector<int>& caption, int mood,
                                     RandomStream speaker_stream,
                                     double jitter_std = kSpeakerJitterStd);
const std::vector<double>& mood_offset(int mood);  // kFrameDim wide, norm 0.5

// ---------------------------------------------------------------------------
// WER machinery
// ---------------------------------------------------------------------------

// Applies round(target_wer * len) edits drawn uniformly from
// {substitute, delete, insert}; replacement tokens come from the content pool.
std::vector<int> corrupt_transcript(const std::vector<int>& caption, double target_wer,
                                    RandomStream stream);

// Levenshtein distance with unit costs, normalized by reference length.
double compute_wer(const std::vector<int>& reference, const std::vector<int>& hypothesis);

// ---------------------------------------------------------------------------
// Dataset files: JSON-lines, header record first, strict schema.
// ---------------------------------------------------------------------------

void write_dataset(const Dataset& dataset, const std::string& path);
Dataset read_dataset(const std::string& path);

}  // namespace bifrec
