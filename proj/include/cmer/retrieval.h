// SPDX-License-Identifier: Apache-2.0
//
// R@k / mR evaluation in both retrieval directions.
//   iqt: image queries rank every caption; a hit is any of the image's captions.
//   tqi: caption queries rank every image; a hit is the caption's image.
#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cmer/data_pipeline.h"
#include "cmer/tensor.h"

namespace cmer {
class RetrievalModel;
}

namespace cmer::eval {

inline constexpr std::array<std::size_t, 3> kRecallKs = {1, 5, 10};

/// Per query, corpus ids by descending dot product; ties by ascending id.
std::vector<std::vector<std::size_t>> rank_retrieval(const Tensor& queries, const Tensor& corpus);

/// 1-based rank of the first ground-truth item in each ranking.
std::vector<std::size_t> first_hit_ranks(const std::vector<std::vector<std::size_t>>& rankings,
                                         const std::vector<std::vector<std::size_t>>& ground_truth);

/// 100 * fraction of queries with a ground-truth item in the top k. k larger
/// than the corpus is clamped (and reported through `clamped`).
double recall_at_k(const std::vector<std::vector<std::size_t>>& rankings,
                   const std::vector<std::vector<std::size_t>>& ground_truth, std::size_t k,
                   bool* clamped = nullptr);

/// Mean of exactly six values: R@1, R@5, R@10 for both directions.
double mean_recall(std::span<const double> r_values);

struct RetrievalResult {
    std::array<double, 3> iqt{};
    std::array<double, 3> tqi{};
    double mr = 0.0;
    std::vector<std::string> query_ids;
    std::vector<std::size_t> first_hit;
    bool clamped = false;
};

/// images: [N, E]; texts: [N * captions_per_image, E] with caption j of image i
/// at row i * captions_per_image + j.
RetrievalResult evaluate_embeddings(const Tensor& images, const Tensor& texts,
                                    const std::vector<std::string>& sample_ids,
                                    std::size_t captions_per_image = data::kCaptionsPerImage);

/// Encodes every sample (no tape) and evaluates.
RetrievalResult evaluate(const RetrievalModel& model, const std::vector<data::PairedSample>& samples,
                         std::size_t chunk = 64);

/// {"iqt": {"r1","r5","r10"}, "tqi": {...}, "mr", "config"}.
std::string result_json(const RetrievalResult& r, const std::string& config_json, int indent = 2);
void write_rank_csv(const RetrievalResult& r, const std::filesystem::path& path);

}  // namespace cmer::eval
