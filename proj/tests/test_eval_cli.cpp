// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "cmer/cli.h"
#include "cmer/errors.h"
#include "cmer/ops.h"
#include "cmer/random.h"
#include "cmer/retrieval.h"
#include "cmer/trainer.h"
#include "fixtures.h"

using namespace cmer;
namespace fs = std::filesystem;

namespace {

Tensor unit_rows(Rng& rng, std::size_t n, std::size_t d) {
    Tensor t = rng.normal_tensor({n, d}, 1.0);
    auto x = t.mutable_data();
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0;
        for (std::size_t c = 0; c < d; ++c) s += x[i * d + c] * x[i * d + c];
        for (std::size_t c = 0; c < d; ++c) x[i * d + c] /= std::sqrt(s);
    }
    return t;
}

std::vector<std::string> ids(std::size_t n) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back("img" + std::to_string(i));
    return out;
}

struct CliRun {
    int code;
    std::string out, err;
};

CliRun cli(std::vector<std::string> args) {
    args.insert(args.begin(), "cmer");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = cli_main(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

}  // namespace

TEST(Rank, MatchesBruteForceSortWithLowerIdOnTies) {
    Rng rng(4);
    // Quantized values force many exact ties.
    Tensor q({6, 3}, std::vector<double>(18)), c({9, 3}, std::vector<double>(27));
    for (double& v : q.mutable_data()) v = std::round(rng.uniform(-2, 2));
    for (double& v : c.mutable_data()) v = std::round(rng.uniform(-2, 2));
    const auto ranks = eval::rank_retrieval(q, c);
    ASSERT_EQ(ranks.size(), 6u);
    for (std::size_t i = 0; i < 6; ++i) {
        std::vector<std::pair<double, std::size_t>> scored;
        for (std::size_t j = 0; j < 9; ++j) {
            double s = 0;
            for (std::size_t k = 0; k < 3; ++k) s += q.at({i, k}) * c.at({j, k});
            scored.emplace_back(-s, j);
        }
        std::sort(scored.begin(), scored.end());
        for (std::size_t r = 0; r < 9; ++r) EXPECT_EQ(ranks[i][r], scored[r].second);
    }
    const Tensor same({2, 1}, {1.0, 1.0});
    EXPECT_EQ(eval::rank_retrieval(Tensor({1, 1}, {1.0}), same)[0], (std::vector<std::size_t>{0, 1}));
}

TEST(Recall, HandComputedCasesAndClamping) {
    const std::vector<std::vector<std::size_t>> rankings = {{2, 0, 1}, {0, 1, 2}, {1, 2, 0}};
    const std::vector<std::vector<std::size_t>> truth = {{0}, {2}, {1}};
    EXPECT_EQ(eval::first_hit_ranks(rankings, truth), (std::vector<std::size_t>{2, 3, 1}));
    EXPECT_DOUBLE_EQ(eval::recall_at_k(rankings, truth, 1), 100.0 / 3.0);
    EXPECT_DOUBLE_EQ(eval::recall_at_k(rankings, truth, 2), 200.0 / 3.0);
    bool clamped = false;
    EXPECT_DOUBLE_EQ(eval::recall_at_k(rankings, truth, 3, &clamped), 100.0);
    EXPECT_FALSE(clamped);
    EXPECT_DOUBLE_EQ(eval::recall_at_k(rankings, truth, 10, &clamped), 100.0);
    EXPECT_TRUE(clamped);
    // Any ground-truth member counts.
    EXPECT_DOUBLE_EQ(eval::recall_at_k({{2, 0, 1}}, {{1, 0}}, 2), 100.0);
}

TEST(Recall, MeanRecallNeedsSixValues) {
    const std::vector<double> six = {10, 20, 30, 40, 50, 60};
    EXPECT_DOUBLE_EQ(eval::mean_recall(six), 35.0);
    const std::vector<double> five = {1, 2, 3, 4, 5};
    EXPECT_THROW(eval::mean_recall(five), ContractError);
}

TEST(Recall, WorkedEmbeddingExample) {
    // Two images with one caption each; caption 0 prefers image 1.
    const Tensor images({2, 2}, {1, 0, 0, 1});
    const Tensor texts({2, 2}, {0.6, 0.8, 0, 1});
    const auto r = eval::evaluate_embeddings(images, texts, ids(2), 1);
    EXPECT_DOUBLE_EQ(r.tqi[0], 50.0);
    EXPECT_DOUBLE_EQ(r.iqt[0], 100.0);
    EXPECT_DOUBLE_EQ(r.tqi[1], 100.0);
    EXPECT_EQ(r.first_hit, (std::vector<std::size_t>{1, 1, 2, 1}));
    EXPECT_TRUE(r.clamped);
    EXPECT_DOUBLE_EQ(r.mr, (100.0 * 3 + 50 + 100 + 100) / 6.0);
}

TEST(Recall, MonotoneInKAndChanceOnRandomEmbeddings) {
    const std::size_t n = 100, caps = 5, trials = 20;
    std::array<double, 3> iqt{}, tqi{};
    for (std::uint64_t seed = 1; seed <= trials; ++seed) {
        Rng rng(seed);
        const auto r = eval::evaluate_embeddings(unit_rows(rng, n, 16), unit_rows(rng, n * caps, 16), ids(n), caps);
        EXPECT_LE(r.iqt[0], r.iqt[1]);
        EXPECT_LE(r.iqt[1], r.iqt[2]);
        EXPECT_LE(r.tqi[0], r.tqi[1]);
        EXPECT_LE(r.tqi[1], r.tqi[2]);
        EXPECT_FALSE(r.clamped);
        for (std::size_t j = 0; j < 3; ++j) {
            iqt[j] += r.iqt[j] / trials;
            tqi[j] += r.tqi[j] / trials;
        }
    }
    for (std::size_t j = 0; j < 3; ++j) {
        const double k = static_cast<double>(eval::kRecallKs[j]);
        // TQI: one relevant image among n. IQT: five relevant captions among n * caps.
        const double p_tqi = k / n;
        double miss = 1.0;
        for (std::size_t i = 0; i < eval::kRecallKs[j]; ++i) miss *= static_cast<double>(n * caps - caps - i) / (n * caps - i);
        const double p_iqt = 1.0 - miss;
        const double se_tqi = 100 * std::sqrt(p_tqi * (1 - p_tqi) / (n * caps * trials));
        const double se_iqt = 100 * std::sqrt(p_iqt * (1 - p_iqt) / (n * trials));
        EXPECT_NEAR(tqi[j], 100 * p_tqi, 5 * se_tqi) << "k=" << k;
        EXPECT_NEAR(iqt[j], 100 * p_iqt, 5 * se_iqt) << "k=" << k;
    }
}

TEST(Eval, IsPureAndDeterministic) {
    RunConfig cfg = fixtures::tiny_run_config();
    const fs::path dir = fixtures::scratch("evalpure");
    data::generate_synthetic(fixtures::tiny_synthetic(), dir);
    const auto ds = train::load_dataset(dir / "manifest.jsonl", cfg);
    cfg.model.text.vocab_size = ds.vocab.size();
    const RetrievalModel model(cfg.model, Strategy::side_branch, 3, cfg.loss, ds.vocab.frozen_rows());
    std::map<std::string, std::vector<double>> before;
    for (const auto& [name, t] : model.parameters()) before[name].assign(t.data().begin(), t.data().end());

    const auto a = eval::evaluate(model, ds.samples, 5);
    const auto b = eval::evaluate(model, ds.samples, 64);
    EXPECT_EQ(a.iqt, b.iqt);
    EXPECT_EQ(a.tqi, b.tqi);
    EXPECT_EQ(a.first_hit, b.first_hit);
    EXPECT_EQ(a.query_ids.size(), ds.samples.size() * (1 + data::kCaptionsPerImage));
    for (const auto& [name, t] : model.parameters()) {
        EXPECT_EQ(std::vector<double>(t.data().begin(), t.data().end()), before.at(name)) << name;
        EXPECT_FALSE(t.grad().has_value()) << name;
    }
    const auto j = nlohmann::json::parse(eval::result_json(a, cfg.to_json()));
    for (const char* key : {"iqt", "tqi", "mr", "config"}) EXPECT_TRUE(j.contains(key)) << key;
    EXPECT_TRUE(j["iqt"].contains("r5"));
    fs::remove_all(dir);
}

TEST(Cli, ExitCodesForBadInput) {
    EXPECT_EQ(cli({}).code, kExitValidation);
    EXPECT_EQ(cli({"--help"}).code, kExitOk);
    EXPECT_EQ(cli({"synth", "--bogus"}).code, kExitValidation);
    EXPECT_EQ(cli({"train", "--manifest", "/nonexistent/manifest.jsonl"}).code, kExitValidation);
    EXPECT_EQ(cli({"profile", "--strategy", "everything"}).code, kExitValidation);
    EXPECT_EQ(cli({"profile", "--focus-field", "3", "--timed", "1", "--warmup", "0"}).code, kExitValidation);
    const CliRun bad = cli({"synth", "--scenes", "0", "--out", (fixtures::scratch("zero") / "d").string()});
    EXPECT_EQ(bad.code, kExitValidation);
    EXPECT_NE(bad.err.find("error"), std::string::npos);
}

TEST(Cli, SynthTrainEvalEndToEnd) {
    const fs::path dir = fixtures::scratch("cli");
    const std::string a = (dir / "a").string(), b = (dir / "b").string();
    ASSERT_EQ(cli({"synth", "--out", a, "--scenes", "3", "--per-scene", "8", "--image-size", "16"}).code, kExitOk);
    ASSERT_EQ(cli({"synth", "--out", b, "--scenes", "3", "--per-scene", "8", "--image-size", "16"}).code, kExitOk);
    EXPECT_EQ(fixtures::slurp(dir / "a" / "manifest.jsonl"), fixtures::slurp(dir / "b" / "manifest.jsonl"));
    for (const auto& e : fs::directory_iterator(dir / "a" / "images"))
        EXPECT_EQ(fixtures::slurp(e.path()), fixtures::slurp(dir / "b" / "images" / e.path().filename()));

    RunConfig cfg = fixtures::tiny_run_config();
    cfg.train.epochs = 1;
    std::ofstream(dir / "cfg.json") << cfg.to_json(2);
    const std::string run = (dir / "run").string();
    const CliRun t = cli({"train", "--config", (dir / "cfg.json").string(), "--manifest", a + "/manifest.jsonl",
                          "--out", run, "--beta", "15"});
    ASSERT_EQ(t.code, kExitOk) << t.err;
    const auto summary = nlohmann::json::parse(t.out);
    EXPECT_EQ(summary[0]["steps"], 5);
    ASSERT_TRUE(fs::exists(dir / "run" / "best.cmck"));
    EXPECT_EQ(train::checkpoint_config(load_checkpoint(dir / "run" / "last.cmck")).loss.beta, 15.0);

    const CliRun e = cli({"eval", "--checkpoint", run + "/best.cmck", "--manifest", a + "/manifest.jsonl", "--split",
                          "test", "--out", (dir / "eval.json").string(), "--ranks", (dir / "ranks.csv").string()});
    ASSERT_EQ(e.code, kExitOk) << e.err;
    const auto j = nlohmann::json::parse(fixtures::slurp(dir / "eval.json"));
    const double mr = j["mr"].get<double>();
    EXPECT_GE(mr, 0.0);
    EXPECT_LE(mr, 100.0);
    EXPECT_EQ(e.out, cli({"eval", "--checkpoint", run + "/best.cmck", "--manifest", a + "/manifest.jsonl"}).out);
    EXPECT_FALSE(fixtures::slurp(dir / "ranks.csv").empty());
    EXPECT_EQ(cli({"eval", "--checkpoint", run + "/best.cmck", "--manifest", a + "/manifest.jsonl", "--split", "dev"})
                  .code,
              kExitValidation);
    fs::remove_all(dir);
}
