// SPDX-License-Identifier: Apache-2.0
#include "cmer/data_pipeline.h"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "cmer/binary_io.h"
#include "cmer/errors.h"
#include "cmer/random.h"

namespace cmer::data {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

constexpr char kCmimMagic[4] = {'C', 'M', 'I', 'M'};
constexpr std::uint32_t kMaxImageDim = 1u << 16;

}  // namespace

void write_cmim(const fs::path& path, const Tensor& image) {
    if (image.rank() != 3) throw DimensionError("CMIM images are [C, H, W], got " + shape_str(image.shape()));
    const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os.write(kCmimMagic, 4);
    io::put_u32(os, static_cast<std::uint32_t>(h));
    io::put_u32(os, static_cast<std::uint32_t>(w));
    io::put_u32(os, static_cast<std::uint32_t>(c));
    const auto px = image.data();
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t ch = 0; ch < c; ++ch) io::put_f64(os, px[(ch * h + y) * w + x]);
        }
    }
    if (!os) throw IoError("write failed for " + path.string());
}

Tensor read_cmim(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open image " + path.string());
    char magic[4];
    if (!is.read(magic, 4) || !std::equal(magic, magic + 4, kCmimMagic)) {
        throw IoError(path.string() + " is not a CMIM image");
    }
    const std::uint32_t h = io::get_u32(is), w = io::get_u32(is), c = io::get_u32(is);
    if (h == 0 || w == 0 || c == 0 || h > kMaxImageDim || w > kMaxImageDim || c > 64) {
        throw IoError(path.string() + ": invalid CMIM dimensions");
    }
    std::vector<double> data(static_cast<std::size_t>(h) * w * c);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t ch = 0; ch < c; ++ch) data[(ch * h + y) * w + x] = io::get_f64(is);
        }
    }
    if (is.peek() != std::char_traits<char>::eof()) throw IoError(path.string() + ": trailing bytes after pixels");
    return Tensor({c, h, w}, std::move(data));
}

std::size_t Manifest::scene_id(const std::string& label) const {
    const auto it = std::find(scenes.begin(), scenes.end(), label);
    if (it == scenes.end()) throw ValidationError("unknown scene \"" + label + "\"");
    return static_cast<std::size_t>(it - scenes.begin());
}

void index_scenes(Manifest& manifest) {
    manifest.scenes.clear();
    for (const auto& r : manifest.records) {
        if (std::find(manifest.scenes.begin(), manifest.scenes.end(), r.scene) == manifest.scenes.end()) {
            manifest.scenes.push_back(r.scene);
        }
    }
}

Manifest load_manifest(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open manifest " + path.string());
    Manifest m;
    m.root = path.parent_path();
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (std::all_of(line.begin(), line.end(), [](unsigned char ch) { return std::isspace(ch); })) continue;
        const std::string where = path.string() + ":" + std::to_string(lineno);
        ordered_json j;
        try {
            j = ordered_json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError(where + ": " + e.what());
        }
        if (!j.is_object() || !j.contains("image") || !j.contains("captions") || !j.contains("scene") ||
            !j["image"].is_string() || !j["scene"].is_string() || !j["captions"].is_array()) {
            throw ParseError(where + ": expected {\"image\": str, \"captions\": [str], \"scene\": str}");
        }
        ManifestRecord r;
        r.image = j["image"].get<std::string>();
        r.scene = j["scene"].get<std::string>();
        const auto& caps = j["captions"];
        if (caps.size() != kCaptionsPerImage) {
            throw ValidationError(where + ": sample \"" + r.image + "\" has " + std::to_string(caps.size()) +
                                  " captions, expected 5");
        }
        for (std::size_t i = 0; i < kCaptionsPerImage; ++i) {
            if (!caps[i].is_string()) throw ParseError(where + ": captions must be strings");
            r.captions[i] = caps[i].get<std::string>();
        }
        m.records.push_back(std::move(r));
    }
    index_scenes(m);
    return m;
}

void save_manifest(const Manifest& manifest, const fs::path& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    for (const auto& r : manifest.records) {
        ordered_json j;
        j["image"] = r.image;
        j["captions"] = r.captions;
        j["scene"] = r.scene;
        os << j.dump() << '\n';
    }
    if (!os) throw IoError("write failed for " + path.string());
}

std::vector<std::string> tokenize_words(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        const auto u = static_cast<unsigned char>(ch);
        if (std::isalnum(u)) {
            cur.push_back(static_cast<char>(std::tolower(u)));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

std::string scene_token_text(const std::string& scene) { return "<scene:" + scene + ">"; }

std::size_t Vocab::id_of(const std::string& token) const {
    const auto it = token_to_id.find(token);
    return it == token_to_id.end() ? kUnkId : it->second;
}

std::size_t Vocab::scene_token(std::size_t scene_id) const {
    if (scene_id >= scene_token_ids.size()) {
        throw VocabularyError("no prompt token for scene id " + std::to_string(scene_id));
    }
    return scene_token_ids[scene_id];
}

std::vector<bool> Vocab::frozen_rows() const {
    std::vector<bool> rows(size(), false);
    for (std::size_t id : scene_token_ids) rows[id] = true;
    return rows;
}

std::string Vocab::to_json() const {
    ordered_json j = ordered_json::object();
    for (std::size_t id = 0; id < id_to_token.size(); ++id) j[id_to_token[id]] = id;
    return j.dump(1);
}

Vocab Vocab::from_json(const std::string& text) {
    ordered_json j;
    try {
        j = ordered_json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("vocabulary: ") + e.what());
    }
    if (!j.is_object()) throw ParseError("vocabulary must be a JSON object");
    Vocab v;
    v.id_to_token.assign(j.size(), "");
    std::vector<bool> seen(j.size(), false);
    for (const auto& [token, idv] : j.items()) {
        if (!idv.is_number_unsigned()) throw ParseError("vocabulary id for \"" + token + "\" is not an integer");
        const auto id = idv.get<std::size_t>();
        if (id >= j.size() || seen[id]) throw ParseError("vocabulary ids must be a permutation of 0..n-1");
        seen[id] = true;
        v.id_to_token[id] = token;
        v.token_to_id[token] = id;
    }
    if (v.size() < kNumReservedIds || v.id_to_token[kBosId] != "<bos>" || v.id_to_token[kEosId] != "<eos>" ||
        v.id_to_token[kPadId] != "<pad>" || v.id_to_token[kUnkId] != "<unk>") {
        throw ParseError("vocabulary must reserve ids 0-3 for <bos>, <eos>, <pad>, <unk>");
    }
    for (std::size_t id = kNumReservedIds; id < v.size(); ++id) {
        if (v.id_to_token[id].rfind("<scene:", 0) == 0) v.scene_token_ids.push_back(id);
    }
    return v;
}

void Vocab::save(const fs::path& path) const {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os << to_json() << '\n';
}

Vocab Vocab::load(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open vocabulary " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return from_json(ss.str());
}

Vocab build_vocab(const Manifest& manifest, std::size_t min_freq) {
    if (manifest.records.empty()) throw ValidationError("cannot build a vocabulary from an empty manifest");
    Vocab v;
    auto add = [&v](const std::string& token) {
        v.token_to_id[token] = v.id_to_token.size();
        v.id_to_token.push_back(token);
    };
    for (const char* reserved : {"<bos>", "<eos>", "<pad>", "<unk>"}) add(reserved);
    for (const auto& scene : manifest.scenes) {
        v.scene_token_ids.push_back(v.id_to_token.size());
        add(scene_token_text(scene));
    }
    std::unordered_map<std::string, std::size_t> freq;
    for (const auto& r : manifest.records) {
        for (const auto& c : r.captions) {
            for (auto& w : tokenize_words(c)) ++freq[w];
        }
    }
    std::vector<std::pair<std::string, std::size_t>> words(freq.begin(), freq.end());
    std::sort(words.begin(), words.end(), [](const auto& a, const auto& b) {
        return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    for (const auto& [w, n] : words) {
        if (n >= std::max<std::size_t>(min_freq, 1)) add(w);
    }
    return v;
}

TokenIds encode_words(std::string_view text, const Vocab& vocab) {
    TokenIds ids;
    for (const auto& w : tokenize_words(text)) ids.push_back(vocab.id_of(w));
    return ids;
}

TokenIds frame_tokens(const TokenIds& content, std::size_t max_len) {
    if (max_len < 2) throw ConfigError("max_len must allow BOS and EOS");
    TokenIds out{kBosId};
    const std::size_t keep = std::min(content.size(), max_len - 2);
    out.insert(out.end(), content.begin(), content.begin() + static_cast<std::ptrdiff_t>(keep));
    out.push_back(kEosId);
    return out;
}

namespace {

TokenIds with_prompt(const TokenIds& content, std::size_t prompt_id, std::size_t max_len) {
    if (max_len < 3) throw ConfigError("max_len must allow BOS, the scene prompt and EOS");
    TokenIds out{kBosId, prompt_id};
    const std::size_t keep = std::min(content.size(), max_len - 3);
    out.insert(out.end(), content.begin(), content.begin() + static_cast<std::ptrdiff_t>(keep));
    out.push_back(kEosId);
    return out;
}

}  // namespace

TokenIds augment_with_scene(const TokenIds& content, std::size_t scene_id, const Vocab& vocab, std::size_t max_len) {
    return with_prompt(content, vocab.scene_token(scene_id), max_len);
}

std::vector<PairedSample> load_samples(const Manifest& manifest, const Vocab& vocab, std::size_t max_len,
                                       bool augment, std::size_t expected_channels, std::size_t expected_size) {
    std::vector<PairedSample> out;
    out.reserve(manifest.records.size());
    for (const auto& r : manifest.records) {
        PairedSample s;
        s.image = read_cmim(manifest.root / r.image);
        if ((expected_channels && s.image.dim(0) != expected_channels) ||
            (expected_size && (s.image.dim(1) != expected_size || s.image.dim(2) != expected_size))) {
            throw ValidationError("image " + r.image + " has shape " + shape_str(s.image.shape()) +
                                  " but the model expects [" + std::to_string(expected_channels) + "," +
                                  std::to_string(expected_size) + "," + std::to_string(expected_size) + "]");
        }
        s.scene_id = manifest.scene_id(r.scene);
        // Prompt tokens are looked up by label so a vocabulary built from
        // another manifest (different scene order) still maps correctly.
        std::size_t prompt = kUnkId;
        if (augment) {
            const auto it = vocab.token_to_id.find(scene_token_text(r.scene));
            if (it == vocab.token_to_id.end()) {
                throw ValidationError("scene \"" + r.scene + "\" has no prompt token in the vocabulary");
            }
            prompt = it->second;
        }
        for (std::size_t i = 0; i < kCaptionsPerImage; ++i) {
            const TokenIds content = encode_words(r.captions[i], vocab);
            s.captions[i] = augment ? with_prompt(content, prompt, max_len) : frame_tokens(content, max_len);
        }
        s.sample_id = fs::path(r.image).stem().string();
        out.push_back(std::move(s));
    }
    return out;
}

Split parse_split(const std::string& name) {
    if (name == "train") return Split::train;
    if (name == "val") return Split::val;
    if (name == "test") return Split::test;
    throw ConfigError("unknown split \"" + name + "\" (expected train, val or test)");
}

std::string split_name(Split split) {
    switch (split) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "train";
}

Split split_of(std::size_t manifest_index) {
    switch (manifest_index % 10) {
        case 8: return Split::val;
        case 9: return Split::test;
        default: return Split::train;
    }
}

std::vector<std::size_t> split_indices(std::size_t count, Split split) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < count; ++i) {
        if (split_of(i) == split) out.push_back(i);
    }
    return out;
}

std::vector<PairedSample> select(const std::vector<PairedSample>& samples, Split split) {
    std::vector<PairedSample> out;
    for (std::size_t i : split_indices(samples.size(), split)) out.push_back(samples[i]);
    return out;
}

Tensor stack_images(const std::vector<PairedSample>& samples, const std::vector<std::size_t>& indices) {
    if (indices.empty()) throw DimensionError("cannot stack zero images");
    const Shape& s = samples.at(indices.front()).image.shape();
    std::vector<double> data;
    data.reserve(indices.size() * numel(s));
    for (std::size_t i : indices) {
        const Tensor& img = samples.at(i).image;
        if (img.shape() != s) throw DimensionError("images in a batch must share a shape");
        data.insert(data.end(), img.data().begin(), img.data().end());
    }
    return Tensor({indices.size(), s[0], s[1], s[2]}, std::move(data));
}

std::uint64_t shuffle_seed(std::uint64_t seed, std::size_t epoch) { return mix_seed(seed, epoch, 0x5348554646ull); }

std::vector<Batch> make_batches(const std::vector<PairedSample>& samples, std::size_t batch_size, std::uint64_t seed,
                                std::size_t epoch) {
    if (batch_size < 2) throw ConfigError("batch_size must be at least 2 for in-batch negatives");
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(shuffle_seed(seed, epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    const std::size_t caption = epoch % kCaptionsPerImage;
    std::vector<Batch> out;
    for (std::size_t start = 0; start + batch_size <= order.size(); start += batch_size) {
        Batch b;
        b.sample_indices.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                                order.begin() + static_cast<std::ptrdiff_t>(start + batch_size));
        b.images = stack_images(samples, b.sample_indices);
        b.caption_index = caption;
        for (std::size_t i : b.sample_indices) {
            b.tokens.push_back(samples[i].captions[caption]);
            b.scene_ids.push_back(samples[i].scene_id);
        }
        out.push_back(std::move(b));
    }
    return out;
}

namespace {

const char* const kSceneNames[] = {"airport", "pond",   "forest",   "farmland", "harbor",  "desert",
                                   "school",  "bridge", "stadium",  "beach",    "mountain", "parking",
                                   "river",   "church", "industry", "meadow"};
const char* const kMotifs[] = {"striped", "columned", "diagonal", "checkered", "dotted", "banded", "gridded", "plain"};
const char* const kColors[] = {"red", "green", "blue", "yellow", "cyan", "magenta", "orange", "gray"};
constexpr double kPalette[8][3] = {{0.85, 0.20, 0.20}, {0.20, 0.75, 0.25}, {0.20, 0.30, 0.85}, {0.85, 0.80, 0.20},
                                   {0.20, 0.80, 0.80}, {0.80, 0.25, 0.80}, {0.90, 0.55, 0.15}, {0.50, 0.50, 0.50}};
const char* const kQuadrants[] = {"top left", "top right", "bottom left", "bottom right"};

std::string scene_name(std::size_t i) {
    constexpr std::size_t n = std::size(kSceneNames);
    return i < n ? kSceneNames[i] : "scene" + std::to_string(i);
}

double motif_value(std::size_t motif, std::size_t y, std::size_t x, std::size_t size) {
    const std::size_t p = std::max<std::size_t>(size / 8, 2);
    switch (motif % 8) {
        case 0: return (y / p) % 2 == 0 ? 1.0 : 0.0;
        case 1: return (x / p) % 2 == 0 ? 1.0 : 0.0;
        case 2: return ((x + y) / p) % 2 == 0 ? 1.0 : 0.0;
        case 3: return ((x / p) + (y / p)) % 2 == 0 ? 1.0 : 0.0;
        case 4: return (x % (2 * p) < p / 2 + 1 && y % (2 * p) < p / 2 + 1) ? 1.0 : 0.0;
        case 5: return (y / (2 * p)) % 2 == 0 ? 1.0 : 0.0;
        case 6: return (x % (2 * p) == 0 || y % (2 * p) == 0) ? 1.0 : 0.0;
        default: return 0.5;
    }
}

std::array<std::string, kCaptionsPerImage> make_captions(const std::string& color, const std::string& motif,
                                                         const std::string& size, const std::string& where) {
    return {
        "a " + color + " " + motif + " area with a " + size + " bright target in the " + where,
        size + " bright object at the " + where + " of a " + color + " " + motif + " scene",
        "the " + motif + " region is " + color + " and holds a " + size + " target at the " + where,
        "aerial view of " + color + " " + motif + " ground with a " + size + " bright spot " + where,
        color + " " + motif + " pattern, " + size + " bright square, " + where,
    };
}

}  // namespace

Manifest generate_synthetic(const SyntheticConfig& cfg, const fs::path& out_dir) {
    if (cfg.num_scenes == 0 || cfg.images_per_scene == 0 || cfg.image_size < 4 || cfg.channels == 0) {
        throw ConfigError("synthetic dataset parameters must be positive (image_size >= 4)");
    }
    fs::create_directories(out_dir / "images");
    Manifest m;
    m.root = out_dir;
    const std::size_t n = cfg.image_size;
    for (std::size_t s = 0; s < cfg.num_scenes; ++s) {
        const std::string scene = scene_name(s);
        const std::size_t motif = s % 8;
        const std::size_t color = (s + 3 * (s / 8)) % 8;
        for (std::size_t k = 0; k < cfg.images_per_scene; ++k) {
            Rng rng(mix_seed(cfg.seed, s, k));
            const std::size_t quadrant = rng.below(4);
            const bool large = rng.below(2) == 1;
            const std::size_t side = large ? std::max<std::size_t>(n / 4, 2) : std::max<std::size_t>(n / 8, 1);
            const std::size_t half = n / 2;
            const std::size_t oy = (quadrant / 2) * half + rng.below(half - side + 1);
            const std::size_t ox = (quadrant % 2) * half + rng.below(half - side + 1);

            std::vector<double> px(cfg.channels * n * n);
            for (std::size_t c = 0; c < cfg.channels; ++c) {
                const double base = kPalette[color][c % 3];
                for (std::size_t y = 0; y < n; ++y) {
                    for (std::size_t x = 0; x < n; ++x) {
                        double v = base * (0.45 + 0.45 * motif_value(motif, y, x, n)) + rng.uniform(-0.08, 0.08);
                        if (y >= oy && y < oy + side && x >= ox && x < ox + side) v = 0.97 + rng.uniform(-0.02, 0.02);
                        px[(c * n + y) * n + x] = std::clamp(v, 0.0, 1.0);
                    }
                }
            }
            char name[64];
            std::snprintf(name, sizeof(name), "%s_%03zu.cmim", scene.c_str(), k);
            const std::string rel = std::string("images/") + name;
            write_cmim(out_dir / rel, Tensor({cfg.channels, n, n}, std::move(px)));

            ManifestRecord r;
            r.image = rel;
            r.scene = scene;
            r.captions = make_captions(kColors[color], kMotifs[motif], large ? "large" : "small", kQuadrants[quadrant]);
            m.records.push_back(std::move(r));
        }
    }
    index_scenes(m);
    save_manifest(m, out_dir / "manifest.jsonl");
    return m;
}

}  // namespace cmer::data
