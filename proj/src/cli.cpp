// SPDX-License-Identifier: Apache-2.0
#include "cmer/cli.h"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "cmer/data_pipeline.h"
#include "cmer/errors.h"
#include "cmer/model.h"
#include "cmer/profiler.h"
#include "cmer/retrieval.h"
#include "cmer/trainer.h"

namespace cmer {

namespace fs = std::filesystem;

namespace {

// Flags that override values from --config.
struct Overrides {
    std::string config_path;
    double margin = 0, beta = 0, temperature = 0, lr = 0, weight_decay = 0;
    std::size_t queue_mult = 0, queue_start = 0, focus_field = 0, hidden_dim = 0, heads = 0, lora_rank = 0;
    std::size_t epochs = 0, batch_size = 0, warmup = 0, max_steps = 0;
    std::uint64_t seed = 0;
    std::string strategy;
    bool no_scene_prompt = false;
    std::vector<CLI::Option*> opts;

    void attach(CLI::App* app, bool training) {
        app->add_option("--config", config_path, "flat JSON config file")->check(CLI::ExistingFile);
        opts = {
            app->add_option("--margin", margin, "hinge margin alpha"),
            app->add_option("--beta", beta, "difficulty weight beta"),
            app->add_option("--temperature", temperature, "initial InfoNCE temperature"),
            app->add_option("--queue-mult", queue_mult, "queue capacity as a multiple of batch size"),
            app->add_option("--queue-start", queue_start, "steps before the queue loss is enabled"),
            app->add_option("--focus-field", focus_field, "region side length in patches"),
            app->add_option("--hidden-dim", hidden_dim, "Focus-Adapter hidden dimension"),
            app->add_option("--heads", heads, "Focus-Adapter attention heads"),
            app->add_option("--lora-rank", lora_rank, "LoRA rank"),
        };
        if (training) {
            opts.push_back(app->add_option("--epochs", epochs, "training epochs"));
            opts.push_back(app->add_option("--batch-size", batch_size, "pairs per batch"));
            opts.push_back(app->add_option("--lr", lr, "learning rate"));
            opts.push_back(app->add_option("--weight-decay", weight_decay, "AdamW weight decay"));
            opts.push_back(app->add_option("--warmup-steps", warmup, "linear warmup steps"));
            opts.push_back(app->add_option("--max-steps", max_steps, "stop after this many steps"));
            opts.push_back(app->add_option("--seed", seed, "run seed"));
        }
        opts.push_back(app->add_option("--strategy", strategy, "side_branch | lora_backbone | full_finetune"));
        app->add_flag("--no-scene-prompt", no_scene_prompt, "disable scene-label prompt augmentation");
    }

    RunConfig build() const {
        RunConfig c = config_path.empty() ? default_run_config() : RunConfig::load(config_path);
        auto set = [](const CLI::Option* o, auto& dst, auto value) {
            if (o && o->count() > 0) dst = value;
        };
        auto opt = [this](const char* name) -> const CLI::Option* {
            for (const auto* o : opts) {
                if (o->check_lname(name)) return o;
            }
            return nullptr;
        };
        set(opt("margin"), c.loss.margin, margin);
        set(opt("beta"), c.loss.beta, beta);
        set(opt("temperature"), c.loss.temperature, temperature);
        set(opt("queue-mult"), c.loss.queue_multiplier, queue_mult);
        set(opt("queue-start"), c.loss.queue_start, queue_start);
        set(opt("focus-field"), c.model.focus_field, focus_field);
        set(opt("hidden-dim"), c.model.focus_hidden_dim, hidden_dim);
        set(opt("heads"), c.model.focus_heads, heads);
        set(opt("lora-rank"), c.model.lora_rank, lora_rank);
        set(opt("epochs"), c.train.epochs, epochs);
        set(opt("batch-size"), c.train.batch_size, batch_size);
        set(opt("lr"), c.train.learning_rate, lr);
        set(opt("weight-decay"), c.train.weight_decay, weight_decay);
        set(opt("warmup-steps"), c.train.warmup_steps, warmup);
        set(opt("max-steps"), c.train.max_steps, max_steps);
        set(opt("seed"), c.train.seed, seed);
        if (const auto* o = opt("strategy"); o && o->count() > 0) c.train.strategy = parse_strategy(strategy);
        if (no_scene_prompt) c.model.scene_prompt = false;
        c.model.text.lora_rank = c.model.lora_rank;
        return c;
    }
};

int run_synth(const fs::path& out_dir, const data::SyntheticConfig& cfg, std::ostream& out) {
    const data::Manifest m = data::generate_synthetic(cfg, out_dir);
    out << "wrote " << m.records.size() << " images (" << m.records.size() * data::kCaptionsPerImage
        << " caption pairs, " << m.num_scenes() << " scenes) to " << out_dir.string() << "\n";
    return kExitOk;
}

int run_train(const Overrides& ov, const fs::path& manifest, const fs::path& out_dir, const std::string& resume,
              const std::vector<std::uint64_t>& seeds, std::ostream& out) {
    RunConfig cfg = ov.build();
    const train::Dataset ds = train::load_dataset(manifest, cfg);
    cfg.model.text.vocab_size = ds.vocab.size();
    cfg.validate();

    std::vector<std::uint64_t> run_seeds = seeds.empty() ? std::vector<std::uint64_t>{cfg.train.seed} : seeds;
    if (!resume.empty() && run_seeds.size() > 1) throw ConfigError("--resume cannot be combined with several --seeds");
    nlohmann::ordered_json summary = nlohmann::ordered_json::array();
    double mean_best = 0.0;
    for (std::uint64_t seed : run_seeds) {
        RunConfig c = cfg;
        c.train.seed = seed;
        train::TrainOptions opts;
        opts.out_dir = run_seeds.size() > 1 ? out_dir / ("seed_" + std::to_string(seed)) : out_dir;
        if (!resume.empty()) opts.resume_from = resume;
        const train::TrainResult r = train::train(c, ds, opts);
        nlohmann::ordered_json j;
        j["seed"] = seed;
        j["steps"] = r.steps;
        j["initial_loss"] = r.history.empty() ? 0.0 : r.history.front().loss;
        j["final_loss"] = r.history.empty() ? 0.0 : r.history.back().loss;
        j["best_val_mr"] = r.best_val_mr;
        j["checkpoint"] = (*opts.out_dir / "best.cmck").string();
        summary.push_back(j);
        mean_best += r.best_val_mr / static_cast<double>(run_seeds.size());
    }
    out << summary.dump(2) << "\n";
    if (run_seeds.size() > 1) out << "mean best val mR over " << run_seeds.size() << " seeds: " << std::fixed
                                  << std::setprecision(2) << mean_best << "\n";
    return kExitOk;
}

int run_eval(const fs::path& checkpoint, const fs::path& manifest, const std::string& split_name,
             const std::string& out_path, const std::string& ranks_path, std::ostream& out) {
    const Checkpoint ck = load_checkpoint(checkpoint);
    const RunConfig cfg = train::checkpoint_config(ck);
    const data::Vocab vocab = train::checkpoint_vocab(ck);
    const RetrievalModel model = train::model_from_checkpoint(ck);
    const train::Dataset ds = train::load_dataset(manifest, cfg, vocab);
    const auto samples = split_name == "all" ? ds.samples : data::select(ds.samples, data::parse_split(split_name));
    const eval::RetrievalResult r = eval::evaluate(model, samples);
    const std::string json = eval::result_json(r, cfg.to_json());
    if (!out_path.empty()) {
        std::ofstream os(out_path, std::ios::trunc);
        if (!os) throw IoError("cannot open " + out_path);
        os << json << "\n";
    }
    if (!ranks_path.empty()) eval::write_rank_csv(r, ranks_path);
    out << json << "\n";
    std::ostringstream human;
    human << std::fixed << std::setprecision(2) << "IQT R@1/5/10 " << r.iqt[0] << " / " << r.iqt[1] << " / "
          << r.iqt[2] << "   TQI R@1/5/10 " << r.tqi[0] << " / " << r.tqi[1] << " / " << r.tqi[2] << "   mR "
          << r.mr << "\n";
    std::cerr << human.str();
    return kExitOk;
}

int run_profile(const Overrides& ov, const std::string& manifest, std::size_t batch_size, std::size_t warmup,
                std::size_t timed, const std::string& out_path, std::ostream& out) {
    RunConfig cfg = ov.build();
    data::Batch batch;
    std::vector<bool> frozen;
    if (!manifest.empty()) {
        const train::Dataset ds = train::load_dataset(manifest, cfg);
        cfg.model.text.vocab_size = ds.vocab.size();
        frozen = ds.vocab.frozen_rows();
        auto batches = data::make_batches(ds.samples, batch_size, cfg.train.seed, 0);
        if (batches.empty()) throw ValidationError("manifest has fewer samples than the profiling batch");
        batch = std::move(batches.front());
    } else {
        if (cfg.model.text.vocab_size == 0) cfg.model.text.vocab_size = 64;
        batch = profile::random_batch(cfg, batch_size, cfg.train.seed);
    }
    cfg.train.batch_size = batch_size;
    profile::ProfileOptions po;
    po.warmup_steps = warmup;
    po.timed_steps = timed;
    const auto reports = profile::profile_strategies(cfg, batch, frozen, po);
    const std::string json = profile::reports_json(reports, cfg.to_json());
    if (!out_path.empty()) {
        std::ofstream os(out_path, std::ios::trunc);
        if (!os) throw IoError("cannot open " + out_path);
        os << json << "\n";
    }
    out << json << "\n";
    profile::check_memory_ordering(reports);
    return kExitOk;
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"cmer: desk-scale text-image retrieval training"};
    app.require_subcommand(1);

    auto* synth = app.add_subcommand("synth", "generate the synthetic dataset");
    std::string synth_out = "data";
    data::SyntheticConfig scfg;
    synth->add_option("--out", synth_out, "output directory");
    synth->add_option("--scenes", scfg.num_scenes, "number of scenes");
    synth->add_option("--per-scene", scfg.images_per_scene, "images per scene");
    synth->add_option("--image-size", scfg.image_size, "image side in pixels");
    synth->add_option("--channels", scfg.channels, "image channels");
    synth->add_option("--seed", scfg.seed, "generator seed");

    auto* trn = app.add_subcommand("train", "train a model");
    Overrides train_ov;
    train_ov.attach(trn, true);
    std::string train_manifest, train_out = "run", resume;
    std::vector<std::uint64_t> seeds;
    trn->add_option("--manifest", train_manifest, "dataset manifest (JSON lines)")->required()->check(CLI::ExistingFile);
    trn->add_option("--out", train_out, "output directory for checkpoints and metrics");
    trn->add_option("--resume", resume, "checkpoint to resume from")->check(CLI::ExistingFile);
    trn->add_option("--seeds", seeds, "train once per seed")->delimiter(',');

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string ev_ck, ev_manifest, ev_split = "test", ev_out, ev_ranks;
    ev->add_option("--checkpoint", ev_ck, "CMCK checkpoint")->required()->check(CLI::ExistingFile);
    ev->add_option("--manifest", ev_manifest, "dataset manifest")->required()->check(CLI::ExistingFile);
    ev->add_option("--split", ev_split, "train | val | test | all");
    ev->add_option("--out", ev_out, "write the result JSON here");
    ev->add_option("--ranks", ev_ranks, "write per-query ranks CSV here");

    auto* prof = app.add_subcommand("profile", "compare training strategies");
    Overrides prof_ov;
    prof_ov.attach(prof, false);
    std::string prof_manifest, prof_out;
    std::size_t prof_batch = 8, prof_warmup = 5, prof_timed = 10;
    prof->add_option("--manifest", prof_manifest, "take the batch from this dataset")->check(CLI::ExistingFile);
    prof->add_option("--batch", prof_batch, "pairs per batch");
    prof->add_option("--warmup", prof_warmup, "untimed warmup steps");
    prof->add_option("--timed", prof_timed, "timed steps");
    prof->add_option("--out", prof_out, "write the report JSON here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp& e) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return kExitValidation;
    }

    try {
        if (*synth) return run_synth(synth_out, scfg, out);
        if (*trn) return run_train(train_ov, train_manifest, train_out, resume, seeds, out);
        if (*ev) return run_eval(ev_ck, ev_manifest, ev_split, ev_out, ev_ranks, out);
        if (*prof) return run_profile(prof_ov, prof_manifest, prof_batch, prof_warmup, prof_timed, prof_out, out);
    } catch (const NumericError& e) {
        err << "numeric error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitValidation;
    }
    return kExitValidation;
}

}  // namespace cmer
