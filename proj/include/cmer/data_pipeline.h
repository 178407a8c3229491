// SPDX-License-Identifier: Apache-2.0
//
// Manifest/image IO, word-level vocabulary, scene-prompt augmentation,
// batching and the procedural synthetic dataset.
//
// Manifest: JSON lines, one record per image:
//   {"image": "images/pond_003.cmim", "captions": [5 strings], "scene": "pond"}
// Image paths are relative to the manifest's directory.
//
// CMIM image: "CMIM", u32 height, u32 width, u32 channels, then
// height*width*channels f64 values (row-major, channels interleaved), all
// little-endian. In memory images are [channels, height, width] tensors.
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cmer/tensor.h"
#include "cmer/tokens.h"

namespace cmer::data {

inline constexpr std::size_t kCaptionsPerImage = 5;

void write_cmim(const std::filesystem::path& path, const Tensor& image);
Tensor read_cmim(const std::filesystem::path& path);

struct ManifestRecord {
    std::string image;
    std::array<std::string, kCaptionsPerImage> captions;
    std::string scene;
};

struct Manifest {
    std::vector<ManifestRecord> records;
    /// Scene labels in first-appearance order; index == scene id.
    std::vector<std::string> scenes;
    /// Directory image paths are resolved against.
    std::filesystem::path root;

    std::size_t scene_id(const std::string& label) const;
    std::size_t num_scenes() const { return scenes.size(); }
};

Manifest load_manifest(const std::filesystem::path& path);
void save_manifest(const Manifest& manifest, const std::filesystem::path& path);
/// Rebuilds the scene list from the records (first-appearance order).
void index_scenes(Manifest& manifest);

/// Lowercased maximal alphanumeric runs; everything else separates tokens.
std::vector<std::string> tokenize_words(std::string_view text);

/// Ids: 0..3 reserved (BOS, EOS, PAD, UNK), then one <scene:NAME> token per
/// scene in scene-id order, then words by (frequency desc, lexicographic).
struct Vocab {
    std::map<std::string, std::size_t> token_to_id;
    std::vector<std::string> id_to_token;
    std::vector<std::size_t> scene_token_ids;

    std::size_t size() const { return id_to_token.size(); }
    /// UNK for unknown words.
    std::size_t id_of(const std::string& token) const;
    std::size_t scene_token(std::size_t scene_id) const;
    /// One flag per id; true for scene-prompt rows.
    std::vector<bool> frozen_rows() const;

    std::string to_json() const;
    static Vocab from_json(const std::string& text);
    void save(const std::filesystem::path& path) const;
    static Vocab load(const std::filesystem::path& path);

    bool operator==(const Vocab&) const = default;
};

std::string scene_token_text(const std::string& scene);

Vocab build_vocab(const Manifest& manifest, std::size_t min_freq = 1);

/// Content ids without framing.
TokenIds encode_words(std::string_view text, const Vocab& vocab);
/// [BOS, content..., EOS], content tail truncated to fit max_len.
TokenIds frame_tokens(const TokenIds& content, std::size_t max_len);
/// [BOS, <scene>, content..., EOS]; only the content tail is ever truncated.
TokenIds augment_with_scene(const TokenIds& content, std::size_t scene_id, const Vocab& vocab, std::size_t max_len);

struct PairedSample {
    Tensor image;  // [C, H, W]
    std::array<TokenIds, kCaptionsPerImage> captions;
    std::size_t scene_id = 0;
    std::string sample_id;
};

/// Loads every record. With augment, captions carry the scene prompt.
std::vector<PairedSample> load_samples(const Manifest& manifest, const Vocab& vocab, std::size_t max_len,
                                       bool augment, std::size_t expected_channels = 0,
                                       std::size_t expected_size = 0);

enum class Split { train, val, test };
Split parse_split(const std::string& name);
std::string split_name(Split split);
/// Deterministic 80/10/10 split on manifest position: i % 10 == 8 -> val,
/// i % 10 == 9 -> test, otherwise train.
Split split_of(std::size_t manifest_index);
std::vector<std::size_t> split_indices(std::size_t count, Split split);
std::vector<PairedSample> select(const std::vector<PairedSample>& samples, Split split);

struct Batch {
    Tensor images;  // [B, C, H, W]
    std::vector<TokenIds> tokens;
    std::vector<std::size_t> scene_ids;
    std::vector<std::size_t> sample_indices;
    std::size_t caption_index = 0;

    std::size_t size() const { return sample_indices.size(); }
};

Tensor stack_images(const std::vector<PairedSample>& samples, const std::vector<std::size_t>& indices);

/// Seed of the shuffle generator used by make_batches for (seed, epoch).
std::uint64_t shuffle_seed(std::uint64_t seed, std::size_t epoch);

/// Seeded shuffle per (seed, epoch); caption epoch % 5 of every image; the
/// final partial batch is dropped.
std::vector<Batch> make_batches(const std::vector<PairedSample>& samples, std::size_t batch_size, std::uint64_t seed,
                                std::size_t epoch);

struct SyntheticConfig {
    std::size_t num_scenes = 8;
    std::size_t images_per_scene = 16;
    std::size_t image_size = 32;
    std::size_t channels = 3;
    std::uint64_t seed = 7;
};

/// Writes <out_dir>/manifest.jsonl and <out_dir>/images/*.cmim.
Manifest generate_synthetic(const SyntheticConfig& cfg, const std::filesystem::path& out_dir);

}  // namespace cmer::data
