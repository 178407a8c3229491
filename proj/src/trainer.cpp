// SPDX-License-Identifier: Apache-2.0
#include "cmer/trainer.h"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>

#include <json.hpp>

#include "cmer/errors.h"
#include "cmer/ops.h"
#include "cmer/random.h"
#include "cmer/retrieval.h"

namespace cmer::train {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

void adamw_step(const NamedTensors& params, AdamState& state, const TrainConfig& cfg, double lr,
                const RowMasks& frozen_rows) {
    for (const auto& [name, t] : params) {
        if (!t.requires_grad() || !t.grad()) continue;
        for (double g : *t.grad()) {
            if (!std::isfinite(g)) {
                throw NumericError("non-finite gradient in " + name + " at step " + std::to_string(state.step + 1) +
                                   "; no parameter was updated");
            }
        }
    }
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (const auto& [name, tc] : params) {
        if (!tc.requires_grad() || !tc.grad()) continue;
        Tensor t = tc;
        const auto& g = *t.grad();
        auto& m = state.m[name];
        auto& v = state.v[name];
        if (m.empty()) {
            m.assign(g.size(), 0.0);
            v.assign(g.size(), 0.0);
        }
        auto p = t.mutable_data();
        const double decay = 1.0 - lr * cfg.weight_decay;
        const auto mask = frozen_rows.find(name);
        const std::size_t row_len = t.rank() == 0 ? 1 : p.size() / t.dim(0);
        for (std::size_t i = 0; i < p.size(); ++i) {
            if (mask != frozen_rows.end() && mask->second.at(i / row_len)) continue;
            p[i] *= decay;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p[i] -= lr * mhat / (std::sqrt(vhat) + cfg.epsilon);
        }
    }
}

double learning_rate_at(const TrainConfig& cfg, std::uint64_t step) {
    if (cfg.warmup_steps == 0 || step >= cfg.warmup_steps) return cfg.learning_rate;
    return cfg.learning_rate * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
}

Learner::Learner(const RunConfig& cfg, const std::vector<bool>& frozen_token_rows)
    : cfg_(cfg),
      model_(cfg.model, cfg.train.strategy, cfg.train.seed, cfg.loss, frozen_token_rows),
      queue_v_(loss::default_queue_capacity(cfg.train.batch_size, cfg.loss), cfg.model.vision.embed_dim),
      queue_s_(loss::default_queue_capacity(cfg.train.batch_size, cfg.loss), cfg.model.vision.embed_dim) {
    cfg_.validate();
}

StepResult Learner::step(const data::Batch& batch) {
    const auto params = model_.parameters();
    for (const auto& [name, t] : params) Tensor(t).clear_grad();

    const auto t0 = std::chrono::steady_clock::now();
    Tape tape;
    Tensor v, s;
    loss::LossTerms terms;
    {
        TapeScope scope(tape);
        v = model_.encode_images(batch.images);
        s = model_.encode_texts(batch.tokens);
        ModuleScope loss_scope("loss");
        if (adam_.step >= cfg_.loss.queue_start) {
            terms = loss::total_loss(v, s, model_.log_tau(), queue_v_, queue_s_, batch.scene_ids, cfg_.loss);
        } else {
            const loss::NegativeQueue none(0, queue_v_.embed_dim());
            terms = loss::total_loss(v, s, model_.log_tau(), none, none, batch.scene_ids, cfg_.loss);
        }
    }
    StepResult r;
    r.memory = tape_report(tape);
    const double loss_value = terms.total.item();
    if (!std::isfinite(loss_value)) {
        throw NumericError("non-finite loss at step " + std::to_string(adam_.step + 1));
    }
    tape.backward(terms.total);

    const auto& embed = model_.text().token_embed;
    const auto& frozen = model_.text().frozen_rows;
    if (embed.grad()) {
        const std::size_t w = embed.dim(1);
        for (std::size_t row = 0; row < frozen.size(); ++row) {
            if (!frozen[row]) continue;
            for (std::size_t i = 0; i < w; ++i) {
                max_frozen_row_grad_ = std::max(max_frozen_row_grad_, std::abs((*embed.grad())[row * w + i]));
            }
        }
    }

    adamw_step(params, adam_, cfg_.train, learning_rate_at(cfg_.train, adam_.step),
               {{"text.token_embed", model_.text().frozen_rows}});
    queue_v_.push(v.detach(), batch.scene_ids);
    queue_s_.push(s.detach(), batch.scene_ids);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    r.metrics.step = adam_.step;
    r.metrics.loss = loss_value;
    r.metrics.l_batch = terms.batch.item();
    r.metrics.l_queue = terms.queue.item();
    r.metrics.saved_bytes = r.memory.total_saved_bytes;
    r.metrics.pairs_per_s = seconds > 0.0 ? static_cast<double>(batch.size()) / seconds : 0.0;
    return r;
}

namespace {

Tensor copy_of(const Tensor& t) { return Tensor(t.shape(), std::vector<double>(t.data().begin(), t.data().end())); }

Tensor vec_tensor(const std::vector<double>& v) { return Tensor({v.size()}, v); }

void queue_to_tensors(const loss::NegativeQueue& q, const std::string& prefix, std::map<std::string, Tensor>& out) {
    out.emplace(prefix + ".pushes", Tensor::scalar(static_cast<double>(q.pushes())));
    if (q.empty()) return;
    std::vector<double> emb, scenes, ages;
    for (const auto& e : q.entries()) {
        emb.insert(emb.end(), e.embedding.begin(), e.embedding.end());
        scenes.push_back(static_cast<double>(e.scene_id));
        ages.push_back(static_cast<double>(e.age));
    }
    out.emplace(prefix + ".embeddings", Tensor({q.size(), q.embed_dim()}, std::move(emb)));
    out.emplace(prefix + ".scenes", vec_tensor(scenes));
    out.emplace(prefix + ".ages", vec_tensor(ages));
}

loss::NegativeQueue queue_from_tensors(const std::map<std::string, Tensor>& in, const std::string& prefix,
                                       std::size_t capacity, std::size_t dim) {
    std::deque<loss::QueueEntry> entries;
    const auto emb = in.find(prefix + ".embeddings");
    if (emb != in.end()) {
        const Tensor& e = emb->second;
        const Tensor& scenes = in.at(prefix + ".scenes");
        const Tensor& ages = in.at(prefix + ".ages");
        if (e.rank() != 2 || e.dim(1) != dim || scenes.numel() != e.dim(0) || ages.numel() != e.dim(0)) {
            throw ValidationError("checkpoint queue " + prefix + " has inconsistent shapes");
        }
        for (std::size_t i = 0; i < e.dim(0); ++i) {
            loss::QueueEntry entry;
            entry.embedding.assign(e.data().begin() + static_cast<std::ptrdiff_t>(i * dim),
                                   e.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * dim));
            entry.scene_id = static_cast<std::size_t>(scenes.data()[i]);
            entry.age = static_cast<std::uint64_t>(ages.data()[i]);
            entries.push_back(std::move(entry));
        }
    }
    const auto pushes = in.find(prefix + ".pushes");
    loss::NegativeQueue q(capacity, dim);
    q.restore(std::move(entries), pushes == in.end() ? 0 : static_cast<std::uint64_t>(pushes->second.item()));
    return q;
}

void copy_parameters(const NamedTensors& params, const std::map<std::string, Tensor>& in) {
    for (const auto& [name, tc] : params) {
        const auto it = in.find(name);
        if (it == in.end()) throw ValidationError("checkpoint is missing parameter " + name);
        if (it->second.shape() != tc.shape()) {
            throw ValidationError("checkpoint parameter " + name + " has shape " + shape_str(it->second.shape()) +
                                  ", model expects " + shape_str(tc.shape()));
        }
        Tensor t = tc;
        auto dst = t.mutable_data();
        std::copy(it->second.data().begin(), it->second.data().end(), dst.begin());
    }
}

}  // namespace

std::map<std::string, Tensor> Learner::state_tensors() const {
    std::map<std::string, Tensor> out;
    for (const auto& [name, t] : model_.parameters()) out.emplace(name, copy_of(t));
    for (const auto& [name, m] : adam_.m) out.emplace("optim.m." + name, vec_tensor(m));
    for (const auto& [name, v] : adam_.v) out.emplace("optim.v." + name, vec_tensor(v));
    queue_to_tensors(queue_v_, "queue.v", out);
    queue_to_tensors(queue_s_, "queue.s", out);
    return out;
}

void Learner::load_state_tensors(const std::map<std::string, Tensor>& tensors, bool with_optimizer) {
    copy_parameters(model_.parameters(), tensors);
    if (!with_optimizer) return;
    adam_.m.clear();
    adam_.v.clear();
    for (const auto& [name, t] : model_.trainable()) {
        const auto m = tensors.find("optim.m." + name);
        const auto v = tensors.find("optim.v." + name);
        if (m == tensors.end() || v == tensors.end()) continue;
        if (m->second.numel() != t.numel() || v->second.numel() != t.numel()) {
            throw ValidationError("checkpoint optimizer moments for " + name + " have the wrong size");
        }
        adam_.m[name].assign(m->second.data().begin(), m->second.data().end());
        adam_.v[name].assign(v->second.data().begin(), v->second.data().end());
    }
    const std::size_t capacity = queue_v_.capacity(), dim = queue_v_.embed_dim();
    queue_v_ = queue_from_tensors(tensors, "queue.v", capacity, dim);
    queue_s_ = queue_from_tensors(tensors, "queue.s", capacity, dim);
}

Dataset load_dataset(const fs::path& manifest_path, const RunConfig& cfg, const std::optional<data::Vocab>& vocab) {
    Dataset ds;
    ds.manifest = data::load_manifest(manifest_path);
    if (ds.manifest.records.empty()) throw ValidationError("manifest " + manifest_path.string() + " is empty");
    ds.vocab = vocab ? *vocab : data::build_vocab(ds.manifest, cfg.train.min_freq);
    ds.samples = data::load_samples(ds.manifest, ds.vocab, cfg.model.text.max_len, cfg.model.scene_prompt,
                                    cfg.model.vision.channels, cfg.model.vision.image_size);
    return ds;
}

Checkpoint make_checkpoint(const Learner& learner, const Dataset& ds, const TrainProgress& progress) {
    Checkpoint ck;
    ck.step = learner.adam().step;
    ordered_json meta;
    meta["config"] = ordered_json::parse(learner.config().to_json());
    meta["vocab"] = ordered_json::parse(ds.vocab.to_json());
    meta["scenes"] = ds.manifest.scenes;
    meta["epoch"] = progress.epoch;
    meta["batch"] = progress.batch;
    meta["best_val_mr"] = progress.best_val_mr;
    ck.meta_json = meta.dump();
    ck.rng_state = Rng(data::shuffle_seed(learner.config().train.seed, progress.epoch)).state();
    ck.tensors = learner.state_tensors();
    return ck;
}

RunConfig checkpoint_config(const Checkpoint& ck) {
    const auto meta = ordered_json::parse(ck.meta_json);
    if (!meta.contains("config")) throw ValidationError("checkpoint has no config");
    return RunConfig::from_json(meta["config"].dump());
}

data::Vocab checkpoint_vocab(const Checkpoint& ck) {
    const auto meta = ordered_json::parse(ck.meta_json);
    if (!meta.contains("vocab")) throw ValidationError("checkpoint has no vocabulary");
    return data::Vocab::from_json(meta["vocab"].dump());
}

std::vector<std::string> checkpoint_scenes(const Checkpoint& ck) {
    const auto meta = ordered_json::parse(ck.meta_json);
    return meta.value("scenes", std::vector<std::string>{});
}

TrainProgress restore_checkpoint(Learner& learner, const Checkpoint& ck, const Dataset& ds) {
    const auto meta = ordered_json::parse(ck.meta_json);
    if (checkpoint_vocab(ck) != ds.vocab) throw ValidationError("checkpoint vocabulary does not match the dataset");
    TrainProgress p;
    p.epoch = meta.value("epoch", std::size_t{0});
    p.batch = meta.value("batch", std::size_t{0});
    p.best_val_mr = meta.value("best_val_mr", -1.0);
    if (ck.rng_state != Rng(data::shuffle_seed(learner.config().train.seed, p.epoch)).state()) {
        throw ValidationError("checkpoint data-order state does not match the configured seed");
    }
    learner.load_state_tensors(ck.tensors, true);
    learner.adam().step = ck.step;
    return p;
}

RetrievalModel model_from_checkpoint(const Checkpoint& ck) {
    const RunConfig cfg = checkpoint_config(ck);
    const data::Vocab vocab = checkpoint_vocab(ck);
    RetrievalModel model(cfg.model, cfg.train.strategy, cfg.train.seed, cfg.loss, vocab.frozen_rows());
    copy_parameters(model.parameters(), ck.tensors);
    return model;
}

namespace {

void write_line(std::ofstream* os, const ordered_json& j) {
    if (!os) return;
    *os << j.dump() << '\n';
    os->flush();
}

ordered_json metrics_json(const StepMetrics& m) {
    ordered_json j;
    j["step"] = m.step;
    j["loss"] = m.loss;
    j["L_batch"] = m.l_batch;
    j["L_queue"] = m.l_queue;
    j["saved_bytes"] = m.saved_bytes;
    j["pairs_per_s"] = m.pairs_per_s;
    return j;
}

}  // namespace

TrainResult train(const RunConfig& cfg_in, const Dataset& ds, const TrainOptions& opts) {
    RunConfig cfg = cfg_in;
    if (cfg.model.text.vocab_size == 0) cfg.model.text.vocab_size = ds.vocab.size();
    if (cfg.model.text.vocab_size != ds.vocab.size()) {
        throw ValidationError("config vocabulary size " + std::to_string(cfg.model.text.vocab_size) +
                              " does not match the dataset vocabulary (" + std::to_string(ds.vocab.size()) + ")");
    }
    cfg.validate();
    const auto train_set = data::select(ds.samples, data::Split::train);
    const auto val_set = data::select(ds.samples, data::Split::val);
    if (train_set.size() < cfg.train.batch_size) {
        throw ValidationError("training split has " + std::to_string(train_set.size()) +
                              " samples, fewer than batch_size " + std::to_string(cfg.train.batch_size));
    }

    Learner learner(cfg, ds.vocab.frozen_rows());
    TrainProgress progress;
    if (opts.resume_from) {
        const Checkpoint ck = load_checkpoint(*opts.resume_from);
        const RunConfig saved = checkpoint_config(ck);
        if (saved.to_json() != cfg.to_json()) {
            throw ValidationError("resume config differs from the checkpoint's config");
        }
        progress = restore_checkpoint(learner, ck, ds);
    }

    std::optional<std::ofstream> metrics;
    if (opts.out_dir) {
        fs::create_directories(*opts.out_dir);
        ds.vocab.save(*opts.out_dir / "vocab.json");
        metrics.emplace(*opts.out_dir / "metrics.jsonl", std::ios::app);
        if (!*metrics) throw IoError("cannot open metrics log in " + opts.out_dir->string());
    }
    std::ofstream* log = metrics ? &*metrics : nullptr;

    TrainResult result;
    result.best_val_mr = progress.best_val_mr;
    bool stopped = false;
    bool validated = false;
    std::size_t steps_here = 0;

    auto validate_now = [&](std::size_t epoch) {
        if (!opts.validate || val_set.empty()) return;
        const double mr = eval::evaluate(learner.model(), val_set).mr;
        validated = true;
        result.val_mr.push_back(mr);
        ordered_json j;
        j["epoch"] = epoch;
        j["val_mr"] = mr;
        write_line(log, j);
        if (mr > progress.best_val_mr) {
            progress.best_val_mr = mr;
            if (opts.out_dir) save_checkpoint(make_checkpoint(learner, ds, progress), *opts.out_dir / "best.cmck");
        }
    };

    for (std::size_t epoch = progress.epoch; epoch < cfg.train.epochs && !stopped; ++epoch) {
        const auto batches = data::make_batches(train_set, cfg.train.batch_size, cfg.train.seed, epoch);
        for (std::size_t b = progress.batch; b < batches.size(); ++b) {
            if ((cfg.train.max_steps && learner.adam().step >= cfg.train.max_steps) ||
                (opts.stop_after && steps_here >= opts.stop_after)) {
                stopped = true;
                break;
            }
            StepResult r;
            try {
                r = learner.step(batches[b]);
            } catch (const NumericError&) {
                if (opts.out_dir) {
                    save_checkpoint(make_checkpoint(learner, ds, progress), *opts.out_dir / "last_good.cmck");
                }
                throw;
            }
            ++steps_here;
            progress.batch = b + 1;
            result.history.push_back(r.metrics);
            write_line(log, metrics_json(r.metrics));
            if (opts.on_step) opts.on_step(r.metrics);
        }
        if (stopped) break;
        progress.epoch = epoch + 1;
        progress.batch = 0;
        validate_now(epoch);
        if (opts.out_dir) save_checkpoint(make_checkpoint(learner, ds, progress), *opts.out_dir / "last.cmck");
    }
    if (!validated && !result.history.empty()) validate_now(progress.epoch);

    result.best_val_mr = progress.best_val_mr;
    result.steps = learner.adam().step;
    result.max_frozen_row_grad = learner.max_frozen_row_grad();
    result.last = make_checkpoint(learner, ds, progress);
    if (opts.out_dir) save_checkpoint(result.last, *opts.out_dir / "last.cmck");
    return result;
}

}  // namespace cmer::train
