// SPDX-License-Identifier: Apache-2.0
#include "cmer/model.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include <json.hpp>

#include "cmer/errors.h"
#include "cmer/random.h"

namespace cmer {

using ordered_json = nlohmann::ordered_json;

Strategy parse_strategy(const std::string& name) {
    if (name == "side_branch") return Strategy::side_branch;
    if (name == "lora_backbone") return Strategy::lora_backbone;
    if (name == "full_finetune") return Strategy::full_finetune;
    throw ConfigError("unknown strategy \"" + name + "\" (expected side_branch, lora_backbone or full_finetune)");
}

std::string strategy_name(Strategy s) {
    switch (s) {
        case Strategy::side_branch: return "side_branch";
        case Strategy::lora_backbone: return "lora_backbone";
        case Strategy::full_finetune: return "full_finetune";
    }
    return "side_branch";
}

focus::FocusConfig ModelConfig::focus() const {
    focus::FocusConfig f = focus::make_config(vision, focus_hidden_dim, focus_field, focus_heads);
    f.depth = focus_depth;
    f.adapter_stride = adapter_stride;
    return f;
}

void ModelConfig::validate() const {
    vision.validate();
    focus().validate(vision.depth);
    if (vision.embed_dim != text.embed_dim) throw ConfigError("vision and text embed_dim differ");
    if (lora_rank == 0 || lora_rank > std::min(vision.width, text.width)) {
        throw ConfigError("lora_rank must be in [1, min(vision_width, text_width)]");
    }
    if (!(lora_alpha > 0.0)) throw ConfigError("lora_alpha must be positive");
    if (text.heads == 0 || text.width % text.heads != 0) throw ConfigError("text width is not divisible by heads");
    if (text.max_len < 3) throw ConfigError("text_max_len must be at least 3");
}

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (batch_size < 2) throw ConfigError("batch_size must be at least 2 for in-batch negatives");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("adam betas must be in [0, 1)");
    if (!(epsilon > 0.0)) throw ConfigError("adam epsilon must be positive");
}

void RunConfig::validate() const {
    model.validate();
    loss.validate();
    train.validate();
}

RunConfig default_run_config() { return RunConfig{}; }

namespace {

struct Field {
    std::function<void(ordered_json&, const RunConfig&, const std::string&)> get;
    std::function<void(const ordered_json&, RunConfig&, const std::string&)> set;
};

template <typename T, typename Access>
Field field(Access access) {
    Field f;
    f.get = [access](ordered_json& j, const RunConfig& c, const std::string& key) {
        j[key] = access(const_cast<RunConfig&>(c));
    };
    f.set = [access](const ordered_json& v, RunConfig& c, const std::string& key) {
        try {
            if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
                if (!v.is_number_unsigned()) throw ConfigError("");
            } else if constexpr (std::is_same_v<T, double>) {
                if (!v.is_number()) throw ConfigError("");
            } else if constexpr (std::is_same_v<T, bool>) {
                if (!v.is_boolean()) throw ConfigError("");
            }
            access(c) = v.get<T>();
        } catch (const std::exception&) {
            throw ConfigError("config key \"" + key + "\" has the wrong type");
        }
    };
    return f;
}

const std::vector<std::pair<std::string, Field>>& fields() {
    static const std::vector<std::pair<std::string, Field>> table = [] {
        std::vector<std::pair<std::string, Field>> t;
        auto sz = [&t](const char* key, auto access) { t.emplace_back(key, field<std::size_t>(access)); };
        auto dbl = [&t](const char* key, auto access) { t.emplace_back(key, field<double>(access)); };
        sz("vision_image_size", [](RunConfig& c) -> auto& { return c.model.vision.image_size; });
        sz("vision_patch_size", [](RunConfig& c) -> auto& { return c.model.vision.patch_size; });
        sz("vision_channels", [](RunConfig& c) -> auto& { return c.model.vision.channels; });
        sz("vision_width", [](RunConfig& c) -> auto& { return c.model.vision.width; });
        sz("vision_depth", [](RunConfig& c) -> auto& { return c.model.vision.depth; });
        sz("vision_heads", [](RunConfig& c) -> auto& { return c.model.vision.heads; });
        sz("vision_mlp_ratio", [](RunConfig& c) -> auto& { return c.model.vision.mlp_ratio; });
        sz("embed_dim", [](RunConfig& c) -> auto& { return c.model.vision.embed_dim; });
        sz("text_vocab_size", [](RunConfig& c) -> auto& { return c.model.text.vocab_size; });
        sz("text_max_len", [](RunConfig& c) -> auto& { return c.model.text.max_len; });
        sz("text_width", [](RunConfig& c) -> auto& { return c.model.text.width; });
        sz("text_depth", [](RunConfig& c) -> auto& { return c.model.text.depth; });
        sz("text_heads", [](RunConfig& c) -> auto& { return c.model.text.heads; });
        sz("text_mlp_ratio", [](RunConfig& c) -> auto& { return c.model.text.mlp_ratio; });
        sz("focus_hidden_dim", [](RunConfig& c) -> auto& { return c.model.focus_hidden_dim; });
        sz("focus_field", [](RunConfig& c) -> auto& { return c.model.focus_field; });
        sz("focus_heads", [](RunConfig& c) -> auto& { return c.model.focus_heads; });
        sz("focus_depth", [](RunConfig& c) -> auto& { return c.model.focus_depth; });
        sz("adapter_stride", [](RunConfig& c) -> auto& { return c.model.adapter_stride; });
        sz("lora_rank", [](RunConfig& c) -> auto& { return c.model.lora_rank; });
        dbl("lora_alpha", [](RunConfig& c) -> auto& { return c.model.lora_alpha; });
        t.emplace_back("scene_prompt", field<bool>([](RunConfig& c) -> auto& { return c.model.scene_prompt; }));
        dbl("margin", [](RunConfig& c) -> auto& { return c.loss.margin; });
        dbl("beta", [](RunConfig& c) -> auto& { return c.loss.beta; });
        dbl("temperature", [](RunConfig& c) -> auto& { return c.loss.temperature; });
        t.emplace_back("learnable_temperature",
                       field<bool>([](RunConfig& c) -> auto& { return c.loss.learnable_temperature; }));
        sz("queue_mult", [](RunConfig& c) -> auto& { return c.loss.queue_multiplier; });
        sz("queue_start", [](RunConfig& c) -> auto& { return c.loss.queue_start; });
        sz("epochs", [](RunConfig& c) -> auto& { return c.train.epochs; });
        sz("batch_size", [](RunConfig& c) -> auto& { return c.train.batch_size; });
        dbl("learning_rate", [](RunConfig& c) -> auto& { return c.train.learning_rate; });
        dbl("weight_decay", [](RunConfig& c) -> auto& { return c.train.weight_decay; });
        dbl("adam_beta1", [](RunConfig& c) -> auto& { return c.train.beta1; });
        dbl("adam_beta2", [](RunConfig& c) -> auto& { return c.train.beta2; });
        dbl("adam_epsilon", [](RunConfig& c) -> auto& { return c.train.epsilon; });
        t.emplace_back("seed", field<std::uint64_t>([](RunConfig& c) -> auto& { return c.train.seed; }));
        sz("warmup_steps", [](RunConfig& c) -> auto& { return c.train.warmup_steps; });
        sz("max_steps", [](RunConfig& c) -> auto& { return c.train.max_steps; });
        sz("min_freq", [](RunConfig& c) -> auto& { return c.train.min_freq; });
        return t;
    }();
    return table;
}

}  // namespace

std::string RunConfig::to_json(int indent) const {
    ordered_json j = ordered_json::object();
    for (const auto& [key, f] : fields()) f.get(j, *this, key);
    j["strategy"] = strategy_name(train.strategy);
    return j.dump(indent);
}

RunConfig RunConfig::from_json(const std::string& text) {
    ordered_json j;
    try {
        j = ordered_json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("config: ") + e.what());
    }
    if (!j.is_object()) throw ParseError("config must be a flat JSON object");
    RunConfig c;
    std::map<std::string, const Field*> index;
    for (const auto& [key, f] : fields()) index[key] = &f;
    for (const auto& [key, value] : j.items()) {
        if (key == "strategy") {
            if (!value.is_string()) throw ConfigError("config key \"strategy\" must be a string");
            c.train.strategy = parse_strategy(value.get<std::string>());
            continue;
        }
        const auto it = index.find(key);
        if (it == index.end()) throw ConfigError("unknown config key \"" + key + "\"");
        it->second->set(value, c, key);
    }
    c.model.text.embed_dim = c.model.vision.embed_dim;
    c.model.text.lora_rank = c.model.lora_rank;
    c.model.text.lora_alpha = c.model.lora_alpha;
    return c;
}

RunConfig RunConfig::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return from_json(ss.str());
}

RetrievalModel::RetrievalModel(const ModelConfig& cfg, Strategy strategy, std::uint64_t seed,
                               const loss::LossConfig& loss_cfg, const std::vector<bool>& frozen_token_rows)
    : cfg_(cfg), strategy_(strategy) {
    cfg_.text.embed_dim = cfg_.vision.embed_dim;
    cfg_.text.lora_rank = cfg_.lora_rank;
    cfg_.text.lora_alpha = cfg_.lora_alpha;
    cfg_.vision.frozen = strategy != Strategy::full_finetune;
    cfg_.validate();
    loss_cfg.validate();

    // Base weights come from one stream so every strategy starts from the
    // same encoders; adapters draw from a second stream.
    Rng base(mix_seed(seed, 0x62617365ull));
    Rng extra(mix_seed(seed, 0x61647074ull));
    vision_ = vision::init_params(base, cfg_.vision);
    text_ = text::init_params(base, cfg_.text, strategy != Strategy::full_finetune);
    vision_.proj.set_requires_grad(true);

    if (!frozen_token_rows.empty()) {
        if (frozen_token_rows.size() != cfg_.text.vocab_size) {
            throw ConfigError("frozen row mask does not match the vocabulary size");
        }
        text_.frozen_rows = frozen_token_rows;
    }

    switch (strategy) {
        case Strategy::side_branch:
            focus_ = focus::init_params(extra, cfg_.focus(), cfg_.vision.depth);
            break;
        case Strategy::lora_backbone:
            vision::add_lora(vision_, extra, cfg_.lora_rank, cfg_.lora_alpha);
            break;
        case Strategy::full_finetune:
            text::set_base_trainable(text_, true);
            break;
    }
    log_tau_ = Tensor::scalar(std::log(loss_cfg.temperature), loss_cfg.learnable_temperature);
}

Tensor RetrievalModel::encode_images(const Tensor& images) const {
    if (strategy_ == Strategy::side_branch) {
        return focus::encode_images_with_side_branch(images, vision_, *focus_, cfg_.vision, cfg_.focus()).embedding;
    }
    return vision::encode_images(images, vision_, cfg_.vision).embedding;
}

Tensor RetrievalModel::encode_texts(std::span<const TokenIds> tokens) const {
    return text::encode_texts(tokens, text_, cfg_.text);
}

NamedTensors RetrievalModel::parameters() const {
    NamedTensors out = vision_.all();
    for (auto& kv : text_.all()) out.push_back(std::move(kv));
    if (focus_) {
        for (auto& kv : focus_->all()) out.push_back(std::move(kv));
    }
    out.emplace_back("log_tau", log_tau_);
    return out;
}

NamedTensors RetrievalModel::trainable() const {
    NamedTensors out;
    for (auto& [name, t] : parameters()) {
        if (t.requires_grad()) out.emplace_back(name, t);
    }
    return out;
}

std::size_t count_trainable(const NamedTensors& params) {
    std::size_t n = 0;
    for (const auto& [name, t] : params) {
        if (t.requires_grad()) n += t.numel();
    }
    return n;
}

std::size_t count_trainable(const RetrievalModel& model) {
    std::size_t n = count_trainable(model.parameters());
    const auto& text = model.text();
    if (text.token_embed.requires_grad()) {
        const auto frozen = static_cast<std::size_t>(std::count(text.frozen_rows.begin(), text.frozen_rows.end(), true));
        n -= frozen * text.token_embed.dim(1);
    }
    return n;
}

}  // namespace cmer
