#include "bifrec/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "bifrec/errors.hpp"

namespace bifrec {

namespace {

using nlohmann::ordered_json;

// World-level audio constants share one fixed key so that every dataset
// speaks the same synthetic language.
constexpr uint64_t kAudioWorldKey = 0xb1f2ec0a11d10ULL;

struct VocabLayout {
    std::vector<std::string> words;
    std::size_t objects_start, colors_start, cells_start, fillers_start, connect_start;
    std::vector<int> fillers;
    std::vector<int> content;
};

const VocabLayout& layout() {
    static const VocabLayout v = [] {
        VocabLayout l;
        l.words.push_back("<bos>");
        l.objects_start = l.words.size();
        for (const char* w : {"ball", "tree", "car", "dog", "fish", "star", "cup", "hat"})
            l.words.push_back(w);
        l.colors_start = l.words.size();
        for (const char* w : {"red", "blue", "green", "gold"}) l.words.push_back(w);
        l.cells_start = l.words.size();
        for (std::size_t i = 0; i < kNumCells; ++i)
            l.words.push_back("spot" + std::to_string(i));
        l.fillers_start = l.words.size();
        for (const char* w : {"um", "uh", "erm", "hmm"}) l.words.push_back(w);
        l.connect_start = l.words.size();
        for (const char* w :
             {"a", "the", "there", "is", "at", "and", "i", "see", "it", "was", "on", "then"})
            l.words.push_back(w);
        for (std::size_t i = l.fillers_start; i < l.connect_start; ++i)
            l.fillers.push_back(static_cast<int>(i));
        // substitution/insertion pool: objects, colors, cells, connectives
        for (std::size_t i = l.objects_start; i < l.fillers_start; ++i)
            l.content.push_back(static_cast<int>(i));
        for (std::size_t i = l.connect_start; i < l.words.size(); ++i)
            l.content.push_back(static_cast<int>(i));
        return l;
    }();
    return v;
}

int connective(const char* word) {
    const auto& l = layout();
    for (std::size_t i = l.connect_start; i < l.words.size(); ++i)
        if (l.words[i] == word) return static_cast<int>(i);
    throw DataError(std::string("unknown connective: ") + word);
}

const std::vector<std::vector<double>>& token_templates() {
    // one fixed template row per (token, frame-in-token)
    static const std::vector<std::vector<double>> table = [] {
        std::vector<std::vector<double>> t(vocab_size() * kFramesPerToken);
        RandomStream world(kAudioWorldKey);
        for (std::size_t tok = 0; tok < vocab_size(); ++tok) {
            for (std::size_t j = 0; j < kFramesPerToken; ++j) {
                RandomStream rs = world.fork("template").fork(tok * kFramesPerToken + j);
                auto& row = t[tok * kFramesPerToken + j];
                row.resize(kFrameDim);
                for (auto& v : row) v = rs.normal(0.0, 1.0);
            }
        }
        return t;
    }();
    return table;
}

}  // namespace

const std::vector<std::string>& vocabulary() { return layout().words; }
std::size_t vocab_size() { return layout().words.size(); }

int object_token(std::size_t object_id) {
    if (object_id >= kNumObjects) throw DataError("object id out of range");
    return static_cast<int>(layout().objects_start + object_id);
}

int color_token(std::size_t color_id) {
    if (color_id >= kNumColors) throw DataError("color id out of range");
    return static_cast<int>(layout().colors_start + color_id);
}

int cell_token(std::size_t cell_id) {
    if (cell_id >= kNumCells) throw DataError("cell id out of range");
    return static_cast<int>(layout().cells_start + cell_id);
}

bool is_filler_token(int token) {
    const auto& l = layout();
    return token >= static_cast<int>(l.fillers_start) &&
           token < static_cast<int>(l.connect_start);
}

const std::vector<int>& filler_tokens() { return layout().fillers; }
const std::vector<int>& content_tokens() { return layout().content; }

const std::vector<std::string>& mood_names() {
    static const std::vector<std::string> names = {"neutral", "happy", "sad", "angry"};
    return names;
}

std::size_t Scene::occupied() const {
    std::size_t n = 0;
    for (const auto& c : cells) n += c.object_id >= 0 ? 1 : 0;
    return n;
}

std::string style_name(DatasetStyle style) {
    switch (style) {
        case DatasetStyle::scripted: return "scripted";
        case DatasetStyle::unscripted: return "unscripted";
        case DatasetStyle::mood_aware: return "mood_aware";
    }
    throw DataError("bad style enum");
}

DatasetStyle parse_style(const std::string& name) {
    if (name == "scripted") return DatasetStyle::scripted;
    if (name == "unscripted") return DatasetStyle::unscripted;
    if (name == "mood_aware") return DatasetStyle::mood_aware;
    throw UsageError("unknown dataset style '" + name +
                     "' (expected scripted, unscripted or mood_aware)");
}

std::size_t patch_dim() { return kNumObjects + kNumColors + kNumMoods; }

long confusable_twin(long image_id) { return image_id ^ 1L; }

std::vector<std::size_t> Dataset::split_indices(bool train) const {
    const auto& ids = train ? header.train_image_ids : header.test_image_ids;
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i)
        if (std::binary_search(ids.begin(), ids.end(), samples[i].image_id)) out.push_back(i);
    return out;
}

bool Dataset::is_train_image(long image_id) const {
    return std::binary_search(header.train_image_ids.begin(), header.train_image_ids.end(),
                              image_id);
}

std::vector<double> scene_features(const Scene& scene) {
    std::size_t pd = patch_dim();
    std::vector<double> out(kNumCells * pd, 0.0);
    for (std::size_t c = 0; c < kNumCells; ++c) {
        const auto& cell = scene.cells[c];
        double* f = out.data() + c * pd;
        if (cell.object_id >= 0) {
            f[cell.object_id] = 1.0;
            f[kNumObjects + cell.color_id] = 1.0;
        }
        if (scene.tint_id >= 0) f[kNumObjects + kNumColors + scene.tint_id] = 1.0;
    }
    return out;
}

namespace {

Scene random_scene(RandomStream rs) {
    Scene scene;
    scene.cells.resize(kNumCells);
    std::size_t occupied = 2 + rs.uniform_index(4);  // 2..5
    std::vector<std::size_t> order(kNumCells);
    for (std::size_t i = 0; i < kNumCells; ++i) order[i] = i;
    for (std::size_t i = kNumCells - 1; i > 0; --i)
        std::swap(order[i], order[rs.uniform_index(i + 1)]);
    for (std::size_t i = 0; i < occupied; ++i) {
        auto& cell = scene.cells[order[i]];
        cell.object_id = static_cast<int>(rs.uniform_index(kNumObjects));
        cell.color_id = static_cast<int>(rs.uniform_index(kNumColors));
    }
    return scene;
}

std::vector<std::size_t> occupied_cells(const Scene& scene) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < kNumCells; ++i)
        if (scene.cells[i].object_id >= 0) out.push_back(i);
    return out;
}

std::vector<int> compose_scripted(const Scene& scene, RandomStream& rs) {
    static const std::vector<std::vector<const char*>> openers = {
        {"i", "see"}, {"there", "is"}, {"it", "was"}, {"then", "the"}};
    auto cells = occupied_cells(scene);
    std::size_t c = cells.size();
    // position words on a rotating subset keeps lengths in [8, 12]
    std::size_t with_position =
        std::min(c, static_cast<std::size_t>(std::max<long>(0, 10 - 2 * static_cast<long>(c))));
    std::size_t rot = rs.uniform_index(c);
    std::vector<bool> has_pos(c, false);
    for (std::size_t i = 0; i < with_position; ++i) has_pos[(rot + i) % c] = true;

    std::vector<int> out;
    for (const char* w : openers[rs.uniform_index(openers.size())]) out.push_back(connective(w));
    for (std::size_t i = 0; i < c; ++i) {
        const auto& cell = scene.cells[cells[i]];
        out.push_back(color_token(cell.color_id));
        out.push_back(object_token(cell.object_id));
        if (has_pos[i]) out.push_back(cell_token(cells[i]));
    }
    return out;
}

std::vector<int> compose_unscripted(const Scene& scene, RandomStream& rs) {
    constexpr std::size_t min_len = 25, max_len = 40;
    auto cells = occupied_cells(scene);
    std::vector<std::vector<int>> clauses;
    for (std::size_t cell : cells) {
        const auto& sc = scene.cells[cell];
        clauses.push_back({connective("and"), connective("there"), connective("is"),
                           connective("a"), color_token(sc.color_id),
                           object_token(sc.object_id), connective("at"),
                           cell_token(cell)});
    }
    if (rs.bernoulli(0.3)) clauses.push_back(clauses[rs.uniform_index(clauses.size())]);
    for (std::size_t i = clauses.size() - 1; i > 0; --i)
        std::swap(clauses[i], clauses[rs.uniform_index(i + 1)]);

    std::vector<int> out = {connective("i"), connective("see"), connective("the")};
    for (const auto& clause : clauses) out.insert(out.end(), clause.begin(), clause.end());

    std::vector<int> with_fillers;
    for (int tok : out) {
        if (rs.bernoulli(0.15))
            with_fillers.push_back(filler_tokens()[rs.uniform_index(filler_tokens().size())]);
        with_fillers.push_back(tok);
    }
    while (with_fillers.size() < min_len)
        with_fillers.push_back(filler_tokens()[rs.uniform_index(filler_tokens().size())]);
    if (with_fillers.size() > max_len) with_fillers.resize(max_len);
    return with_fillers;
}

}  // namespace

std::vector<int> compose_caption(const Scene& scene, DatasetStyle style, RandomStream stream) {
    if (scene.occupied() < 2 || scene.occupied() > 5)
        throw DataError("scene must have 2..5 occupied cells");
    switch (style) {
        case DatasetStyle::unscripted: return compose_unscripted(scene, stream);
        case DatasetStyle::scripted:
        case DatasetStyle::mood_aware: return compose_scripted(scene, stream);
    }
    throw DataError("bad style enum");
}

const std::vector<double>& mood_offset(int mood) {
    static const std::vector<std::vector<double>> offsets = [] {
        std::vector<std::vector<double>> o(kNumMoods);
        RandomStream world(kAudioWorldKey);
        for (std::size_t m = 0; m < kNumMoods; ++m) {
            RandomStream rs = world.fork("mood").fork(m);
            o[m].resize(kFrameDim);
            double ss = 0.0;
            for (auto& v : o[m]) {
                v = rs.normal(0.0, 1.0);
                ss += v * v;
            }
            double scale = kMoodOffsetNorm / std::sqrt(ss);
            for (auto& v : o[m]) v *= scale;
        }
        return o;
    }();
    if (mood < 0 || static_cast<std::size_t>(mood) >= kNumMoods)
        throw DataError("mood id out of range");
    return offsets[mood];
}

std::vector<double> synthesize_audio(const std::vector<int>& caption, int mood,
                                     RandomStream speaker_stream, double jitter_std) {
    const auto& offset = mood_offset(mood);
    const auto& templates = token_templates();
    std::vector<double> frames;
    frames.reserve(caption.size() * kFramesPerToken * kFrameDim);
    for (int tok : caption) {
        if (tok < 0 || static_cast<std::size_t>(tok) >= vocab_size())
            throw DataError("caption token outside vocabulary");
        for (std::size_t j = 0; j < kFramesPerToken; ++j) {
            const auto& base = templates[static_cast<std::size_t>(tok) * kFramesPerToken + j];
            for (std::size_t d = 0; d < kFrameDim; ++d) {
                double jitter = jitter_std > 0.0 ? speaker_stream.normal(0.0, jitter_std) : 0.0;
                frames.push_back(base[d] + offset[d] + jitter);
            }
        }
    }
    return frames;
}

std::vector<int> corrupt_transcript(const std::vector<int>& caption, double target_wer,
                                    RandomStream stream) {
    if (target_wer < 0.0 || target_wer > 1.0)
        throw DataError("target_wer must lie in [0, 1]");
    std::vector<int> out = caption;
    std::size_t n_ops =
        static_cast<std::size_t>(std::llround(target_wer * static_cast<double>(caption.size())));
    const auto& pool = content_tokens();
    for (std::size_t k = 0; k < n_ops; ++k) {
        std::size_t kind = out.empty() ? 2 : stream.uniform_index(3);
        if (kind == 0) {  // substitute with a genuinely different token
            std::size_t pos = stream.uniform_index(out.size());
            int replacement = pool[stream.uniform_index(pool.size())];
            while (replacement == out[pos])
                replacement = pool[stream.uniform_index(pool.size())];
            out[pos] = replacement;
        } else if (kind == 1) {  // delete
            out.erase(out.begin() + static_cast<long>(stream.uniform_index(out.size())));
        } else {  // insert
            std::size_t pos = stream.uniform_index(out.size() + 1);
            out.insert(out.begin() + static_cast<long>(pos),
                       pool[stream.uniform_index(pool.size())]);
        }
    }
    return out;
}

double compute_wer(const std::vector<int>& reference, const std::vector<int>& hypothesis) {
    if (reference.empty()) throw DataError("compute_wer: reference must be non-empty");
    std::size_t n = reference.size(), m = hypothesis.size();
    std::vector<std::size_t> prev(m + 1), cur(m + 1);
    for (std::size_t j = 0; j <= m; ++j) prev[j] = j;
    for (std::size_t i = 1; i <= n; ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= m; ++j) {
            std::size_t sub = prev[j - 1] + (reference[i - 1] == hypothesis[j - 1] ? 0 : 1);
            cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
        }
        std::swap(prev, cur);
    }
    return static_cast<double>(prev[m]) / static_cast<double>(n);
}

Dataset generate_dataset(DatasetStyle style, long n_images, long captions_per_image,
                         uint64_t seed) {
    if (n_images < 2) throw UsageError("generate_dataset: n_images must be at least 2");
    if (captions_per_image < 1)
        throw UsageError("generate_dataset: captions_per_image must be at least 1");
    if (style == DatasetStyle::mood_aware && n_images % 2 != 0)
        throw UsageError("mood_aware datasets pair images; n_images must be even");

    RandomStream root = RandomStream(seed).fork(style_name(style));
    Dataset ds;
    ds.header.style = style;
    ds.header.seed = seed;
    ds.header.n_images = n_images;
    ds.header.captions_per_image = captions_per_image;
    ds.header.patch_dim_ = patch_dim();
    ds.header.vocab = vocabulary();

    // scenes (mood-aware: one base scene per pair, two tinted copies)
    std::vector<Scene> scenes(static_cast<std::size_t>(n_images));
    if (style == DatasetStyle::mood_aware) {
        for (long p = 0; p < n_images / 2; ++p) {
            Scene base = random_scene(root.fork("scene").fork(static_cast<uint64_t>(p)));
            RandomStream mood_rs = root.fork("pairmood").fork(static_cast<uint64_t>(p));
            int mood_a = static_cast<int>(mood_rs.uniform_index(kNumMoods));
            int mood_b = static_cast<int>(mood_rs.uniform_index(kNumMoods - 1));
            if (mood_b >= mood_a) ++mood_b;
            scenes[2 * p] = base;
            scenes[2 * p].tint_id = mood_a;
            scenes[2 * p + 1] = base;
            scenes[2 * p + 1].tint_id = mood_b;
        }
    } else {
        for (long i = 0; i < n_images; ++i)
            scenes[i] = random_scene(root.fork("scene").fork(static_cast<uint64_t>(i)));
    }

    // split 80/20 by image id; pairs move as one unit
    long unit_count = style == DatasetStyle::mood_aware ? n_images / 2 : n_images;
    std::vector<long> units(static_cast<std::size_t>(unit_count));
    for (long u = 0; u < unit_count; ++u) units[u] = u;
    RandomStream split_rs = root.fork("split");
    for (std::size_t i = units.size() - 1; i > 0; --i)
        std::swap(units[i], units[split_rs.uniform_index(i + 1)]);
    long train_units = unit_count * 8 / 10;
    if (train_units < 1) train_units = 1;
    if (train_units >= unit_count) train_units = unit_count - 1;
    for (long u = 0; u < unit_count; ++u) {
        auto& dest = u < train_units ? ds.header.train_image_ids : ds.header.test_image_ids;
        if (style == DatasetStyle::mood_aware) {
            dest.push_back(2 * units[u]);
            dest.push_back(2 * units[u] + 1);
        } else {
            dest.push_back(units[u]);
        }
    }
    std::sort(ds.header.train_image_ids.begin(), ds.header.train_image_ids.end());
    std::sort(ds.header.test_image_ids.begin(), ds.header.test_image_ids.end());

    long sample_id = 0;
    for (long img = 0; img < n_images; ++img) {
        const Scene& scene = scenes[static_cast<std::size_t>(img)];
        std::vector<double> features = scene_features(scene);
        for (long k = 0; k < captions_per_image; ++k) {
            PairedSample s;
            s.sample_id = sample_id++;
            s.image_id = img;
            s.image = features;
            // pair members share caption text: key the caption stream by pair
            long caption_unit = style == DatasetStyle::mood_aware ? img / 2 : img;
            s.caption = compose_caption(
                scene, style,
                root.fork("caption").fork(
                    static_cast<uint64_t>(caption_unit * captions_per_image + k)));
            if (style == DatasetStyle::mood_aware) {
                s.mood = scene.tint_id;
            } else {
                s.mood = static_cast<int>(
                    root.fork("mood").fork(static_cast<uint64_t>(s.sample_id)).uniform_index(
                        kNumMoods));
            }
            s.audio = synthesize_audio(
                s.caption, s.mood,
                root.fork("speaker").fork(static_cast<uint64_t>(s.sample_id)));
            s.n_frames = s.caption.size() * kFramesPerToken;
            ds.samples.push_back(std::move(s));
        }
    }
    return ds;
}

namespace {

ordered_json header_to_json(const DatasetHeader& h) {
    ordered_json j;
    j["format_version"] = h.format_version;
    j["style"] = style_name(h.style);
    j["seed"] = h.seed;
    j["n_images"] = h.n_images;
    j["captions_per_image"] = h.captions_per_image;
    j["n_patches"] = h.n_patches;
    j["patch_dim"] = h.patch_dim_;
    j["frame_dim"] = h.frame_dim;
    j["vocab"] = h.vocab;
    j["train_image_ids"] = h.train_image_ids;
    j["test_image_ids"] = h.test_image_ids;
    return j;
}

void check_fields(const nlohmann::json& j, const std::vector<std::string>& required,
                  const std::vector<std::string>& optional, std::size_t line_no) {
    for (const auto& [key, _] : j.items()) {
        if (std::find(required.begin(), required.end(), key) == required.end() &&
            std::find(optional.begin(), optional.end(), key) == optional.end())
            throw DataError("line " + std::to_string(line_no) + ": unknown field '" + key + "'");
    }
    for (const auto& key : required)
        if (!j.contains(key))
            throw DataError("line " + std::to_string(line_no) + ": missing field '" + key + "'");
}

}  // namespace

void write_dataset(const Dataset& dataset, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open '" + path + "' for writing");
    out << header_to_json(dataset.header).dump() << "\n";
    for (const auto& s : dataset.samples) {
        ordered_json j;
        j["sample_id"] = s.sample_id;
        j["image_id"] = s.image_id;
        j["mood"] = s.mood;
        j["caption"] = s.caption;
        j["image"] = s.image;
        j["n_frames"] = s.n_frames;
        j["audio"] = s.audio;
        if (s.has_transcription) {
            j["transcription"] = s.transcription;
            j["realized_wer"] = s.realized_wer;
        }
        out << j.dump() << "\n";
    }
    if (!out) throw DataError("write failed for '" + path + "'");
}

Dataset read_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path + "' for reading");
    std::string line;
    std::size_t line_no = 0;
    Dataset ds;
    auto parse_line = [&](const std::string& text) {
        try {
            return nlohmann::json::parse(text);
        } catch (const nlohmann::json::parse_error& e) {
            throw DataError("line " + std::to_string(line_no) + ": " + e.what());
        }
    };

    if (!std::getline(in, line)) throw DataError("empty dataset file '" + path + "'");
    ++line_no;
    nlohmann::json h = parse_line(line);
    check_fields(h,
                 {"format_version", "style", "seed", "n_images", "captions_per_image",
                  "n_patches", "patch_dim", "frame_dim", "vocab", "train_image_ids",
                  "test_image_ids"},
                 {}, line_no);
    ds.header.format_version = h["format_version"].get<int>();
    if (ds.header.format_version != 1)
        throw DataError("unsupported dataset format_version " +
                        std::to_string(ds.header.format_version));
    ds.header.style = parse_style(h["style"].get<std::string>());
    ds.header.seed = h["seed"].get<uint64_t>();
    ds.header.n_images = h["n_images"].get<long>();
    ds.header.captions_per_image = h["captions_per_image"].get<long>();
    ds.header.n_patches = h["n_patches"].get<std::size_t>();
    ds.header.patch_dim_ = h["patch_dim"].get<std::size_t>();
    ds.header.frame_dim = h["frame_dim"].get<std::size_t>();
    ds.header.vocab = h["vocab"].get<std::vector<std::string>>();
    ds.header.train_image_ids = h["train_image_ids"].get<std::vector<long>>();
    ds.header.test_image_ids = h["test_image_ids"].get<std::vector<long>>();

    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j = parse_line(line);
        check_fields(j, {"sample_id", "image_id", "mood", "caption", "image", "n_frames", "audio"},
                     {"transcription", "realized_wer"}, line_no);
        PairedSample s;
        s.sample_id = j["sample_id"].get<long>();
        s.image_id = j["image_id"].get<long>();
        s.mood = j["mood"].get<int>();
        s.caption = j["caption"].get<std::vector<int>>();
        s.image = j["image"].get<std::vector<double>>();
        s.n_frames = j["n_frames"].get<std::size_t>();
        s.audio = j["audio"].get<std::vector<double>>();
        if (s.audio.size() != s.n_frames * ds.header.frame_dim)
            throw DataError("line " + std::to_string(line_no) + ": audio length mismatch");
        if (s.image.size() != ds.header.n_patches * ds.header.patch_dim_)
            throw DataError("line " + std::to_string(line_no) + ": image length mismatch");
        if (j.contains("transcription") != j.contains("realized_wer"))
            throw DataError("line " + std::to_string(line_no) +
                            ": transcription and realized_wer must appear together");
        if (j.contains("transcription")) {
            s.has_transcription = true;
            s.transcription = j["transcription"].get<std::vector<int>>();
            s.realized_wer = j["realized_wer"].get<double>();
        }
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

}  // namespace bifrec
