// SPDX-License-Identifier: Apache-2.0
#include "cmer/retrieval.h"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <numeric>

#include <json.hpp>

#include "cmer/errors.h"
#include "cmer/model.h"

namespace cmer::eval {

std::vector<std::vector<std::size_t>> rank_retrieval(const Tensor& queries, const Tensor& corpus) {
    if (queries.rank() != 2 || corpus.rank() != 2 || queries.dim(1) != corpus.dim(1)) {
        throw DimensionError("rank_retrieval: expected [Q, E] and [C, E], got " + shape_str(queries.shape()) +
                             " and " + shape_str(corpus.shape()));
    }
    const std::size_t nq = queries.dim(0), nc = corpus.dim(0), e = queries.dim(1);
    const auto q = queries.data();
    const auto c = corpus.data();
    std::vector<std::vector<std::size_t>> out(nq);
    std::vector<double> sim(nc);
    for (std::size_t i = 0; i < nq; ++i) {
        for (std::size_t j = 0; j < nc; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < e; ++k) s += q[i * e + k] * c[j * e + k];
            sim[j] = s;
        }
        auto& order = out[i];
        order.resize(nc);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&sim](std::size_t a, std::size_t b) { return sim[a] > sim[b]; });
    }
    return out;
}

std::vector<std::size_t> first_hit_ranks(const std::vector<std::vector<std::size_t>>& rankings,
                                         const std::vector<std::vector<std::size_t>>& ground_truth) {
    if (rankings.size() != ground_truth.size()) throw DimensionError("rankings and ground truth differ in length");
    std::vector<std::size_t> out(rankings.size(), 0);
    for (std::size_t q = 0; q < rankings.size(); ++q) {
        const auto& gt = ground_truth[q];
        for (std::size_t pos = 0; pos < rankings[q].size(); ++pos) {
            if (std::find(gt.begin(), gt.end(), rankings[q][pos]) != gt.end()) {
                out[q] = pos + 1;
                break;
            }
        }
    }
    return out;
}

double recall_at_k(const std::vector<std::vector<std::size_t>>& rankings,
                   const std::vector<std::vector<std::size_t>>& ground_truth, std::size_t k, bool* clamped) {
    if (k < 1) throw ConfigError("recall_at_k requires k >= 1");
    if (rankings.empty()) throw DegenerateInputError("recall_at_k over zero queries");
    const std::size_t corpus = rankings.front().size();
    if (k > corpus) {
        std::cerr << "warning: k=" << k << " exceeds corpus size " << corpus << "; clamping\n";
        k = corpus;
        if (clamped) *clamped = true;
    }
    const auto ranks = first_hit_ranks(rankings, ground_truth);
    const auto hits = std::count_if(ranks.begin(), ranks.end(), [k](std::size_t r) { return r >= 1 && r <= k; });
    return 100.0 * static_cast<double>(hits) / static_cast<double>(rankings.size());
}

double mean_recall(std::span<const double> r_values) {
    if (r_values.size() != 6) {
        throw ContractError("mean_recall expects six R@k values, got " + std::to_string(r_values.size()));
    }
    return std::accumulate(r_values.begin(), r_values.end(), 0.0) / 6.0;
}

RetrievalResult evaluate_embeddings(const Tensor& images, const Tensor& texts,
                                    const std::vector<std::string>& sample_ids, std::size_t captions_per_image) {
    const std::size_t n = images.dim(0);
    if (texts.dim(0) != n * captions_per_image || sample_ids.size() != n) {
        throw DimensionError("evaluate: expected " + std::to_string(n * captions_per_image) + " captions for " +
                             std::to_string(n) + " images");
    }
    RetrievalResult r;
    const auto iqt_rank = rank_retrieval(images, texts);
    const auto tqi_rank = rank_retrieval(texts, images);
    std::vector<std::vector<std::size_t>> iqt_gt(n), tqi_gt(texts.dim(0));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < captions_per_image; ++c) {
            iqt_gt[i].push_back(i * captions_per_image + c);
            tqi_gt[i * captions_per_image + c] = {i};
        }
    }
    for (std::size_t j = 0; j < kRecallKs.size(); ++j) {
        r.iqt[j] = recall_at_k(iqt_rank, iqt_gt, kRecallKs[j], &r.clamped);
        r.tqi[j] = recall_at_k(tqi_rank, tqi_gt, kRecallKs[j], &r.clamped);
    }
    const std::array<double, 6> six = {r.iqt[0], r.iqt[1], r.iqt[2], r.tqi[0], r.tqi[1], r.tqi[2]};
    r.mr = mean_recall(six);

    const auto iqt_first = first_hit_ranks(iqt_rank, iqt_gt);
    const auto tqi_first = first_hit_ranks(tqi_rank, tqi_gt);
    for (std::size_t i = 0; i < n; ++i) {
        r.query_ids.push_back("iqt/" + sample_ids[i]);
        r.first_hit.push_back(iqt_first[i]);
    }
    for (std::size_t t = 0; t < tqi_first.size(); ++t) {
        r.query_ids.push_back("tqi/" + sample_ids[t / captions_per_image] + "#" +
                              std::to_string(t % captions_per_image));
        r.first_hit.push_back(tqi_first[t]);
    }
    return r;
}

namespace {

Tensor stack_rows(const std::vector<Tensor>& parts, std::size_t e) {
    std::vector<double> data;
    std::size_t rows = 0;
    for (const Tensor& p : parts) {
        data.insert(data.end(), p.data().begin(), p.data().end());
        rows += p.dim(0);
    }
    return Tensor({rows, e}, std::move(data));
}

}  // namespace

RetrievalResult evaluate(const RetrievalModel& model, const std::vector<data::PairedSample>& samples,
                         std::size_t chunk) {
    if (samples.empty()) throw DegenerateInputError("evaluate: empty sample set");
    chunk = std::max<std::size_t>(chunk, 1);
    const std::size_t e = model.config().vision.embed_dim;
    std::vector<Tensor> img_parts, txt_parts;
    std::vector<std::string> ids;
    for (std::size_t start = 0; start < samples.size(); start += chunk) {
        const std::size_t end = std::min(samples.size(), start + chunk);
        std::vector<std::size_t> idx(end - start);
        std::iota(idx.begin(), idx.end(), start);
        img_parts.push_back(model.encode_images(data::stack_images(samples, idx)));
        std::vector<TokenIds> toks;
        for (std::size_t i : idx) {
            for (const auto& c : samples[i].captions) toks.push_back(c);
        }
        txt_parts.push_back(model.encode_texts(toks));
    }
    for (const auto& s : samples) ids.push_back(s.sample_id);
    return evaluate_embeddings(stack_rows(img_parts, e), stack_rows(txt_parts, e), ids);
}

std::string result_json(const RetrievalResult& r, const std::string& config_json, int indent) {
    nlohmann::ordered_json j;
    j["iqt"] = {{"r1", r.iqt[0]}, {"r5", r.iqt[1]}, {"r10", r.iqt[2]}};
    j["tqi"] = {{"r1", r.tqi[0]}, {"r5", r.tqi[1]}, {"r10", r.tqi[2]}};
    j["mr"] = r.mr;
    j["config"] = config_json.empty() ? nlohmann::ordered_json::object() : nlohmann::ordered_json::parse(config_json);
    return j.dump(indent);
}

void write_rank_csv(const RetrievalResult& r, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os << "query_id,rank_of_first_hit\n";
    for (std::size_t i = 0; i < r.query_ids.size(); ++i) os << r.query_ids[i] << ',' << r.first_hit[i] << '\n';
    if (!os) throw IoError("write failed for " + path.string());
}

}  // namespace cmer::eval
