#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "mp3sleep/experiments.hpp"
#include "mp3sleep/binary_io.hpp"
#include "mp3sleep/model.hpp"
#include "mp3sleep/trainer.hpp"

namespace mp3sleep {

// Desk-scale default; the published runs used 512.
inline constexpr std::size_t kDefaultCliBatch = 64;

struct SweepSection {
    std::vector<double> label_fractions{0.01, 0.10, 1.00};
    std::vector<Method> methods{Method::Scratch, Method::PretrainFinetune};
    std::vector<int> pretrain_multipliers{1, 10, 100};
    std::vector<std::uint64_t> seeds{0, 1, 2};
    std::vector<std::string> experiments{"label_efficiency", "pretrain_scaling"};
};

struct RunConfigFile {
    ModelConfig model;
    TrainConfig pretrain;
    TrainConfig finetune;
    SweepSection sweep;

    RunConfigFile() {
        pretrain.batch_size = kDefaultCliBatch;
        pretrain.n_epochs = 50;
        pretrain.learning_rate = 1e-3;
        finetune.batch_size = kDefaultCliBatch;
        finetune.n_epochs = 200;
    }

    SweepSpec sweep_spec() const {
        SweepSpec s;
        s.label_fractions = sweep.label_fractions;
        s.methods = sweep.methods;
        s.pretrain_multipliers = sweep.pretrain_multipliers;
        s.seeds = sweep.seeds;
        s.model = model;
        s.pretrain = pretrain;
        s.finetune = finetune;
        return s;
    }

    void validate() const {
        sweep_spec().validate();
        for (const auto& e : sweep.experiments)
            if (e != "label_efficiency" && e != "pretrain_scaling")
                throw ValidationError("unknown experiment '" + e + "'");
    }
};

inline nlohmann::ordered_json to_json(const SweepSection& s) {
    nlohmann::ordered_json j;
    j["label_fractions"] = s.label_fractions;
    std::vector<std::string> methods;
    for (Method m : s.methods) methods.push_back(method_name(m));
    j["methods"] = methods;
    j["pretrain_multipliers"] = s.pretrain_multipliers;
    j["seeds"] = s.seeds;
    j["experiments"] = s.experiments;
    return j;
}

inline nlohmann::ordered_json to_json(const RunConfigFile& c) {
    nlohmann::ordered_json j;
    j["model"] = to_json(c.model);
    j["pretrain"] = to_json(c.pretrain);
    j["finetune"] = to_json(c.finetune);
    j["sweep"] = to_json(c.sweep);
    return j;
}

namespace detail {

template <typename T>
std::vector<T> typed_list(const nlohmann::json& v, const std::string& key) {
    if (!v.is_array() || v.empty()) throw ValidationError("sweep." + key + " must be a non-empty array");
    std::vector<T> out;
    for (const auto& e : v) {
        if constexpr (std::is_same_v<T, std::string>) {
            if (!e.is_string()) throw ValidationError("sweep." + key + " entries must be strings");
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!e.is_number()) throw ValidationError("sweep." + key + " entries must be numbers");
        } else {
            if (!e.is_number_integer() || e.get<long long>() < 0)
                throw ValidationError("sweep." + key + " entries must be non-negative integers");
        }
        out.push_back(e.get<T>());
    }
    return out;
}

inline SweepSection sweep_section_from_json(const nlohmann::json& j, SweepSection s) {
    if (!j.is_object()) throw ValidationError("sweep section must be a JSON object");
    for (const auto& [key, v] : j.items()) {
        if (key == "label_fractions") s.label_fractions = typed_list<double>(v, key);
        else if (key == "pretrain_multipliers") s.pretrain_multipliers = typed_list<int>(v, key);
        else if (key == "seeds") s.seeds = typed_list<std::uint64_t>(v, key);
        else if (key == "experiments") s.experiments = typed_list<std::string>(v, key);
        else if (key == "methods") {
            s.methods.clear();
            for (const auto& name : typed_list<std::string>(v, key)) s.methods.push_back(method_from_name(name));
        } else
            throw ValidationError("unknown sweep config key '" + key + "'");
    }
    return s;
}

}  // namespace detail

// Missing sections and keys take the defaults; unknown keys are errors.
inline RunConfigFile run_config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ValidationError("run config must be a JSON object");
    RunConfigFile c;
    for (const auto& [key, v] : j.items()) {
        if (key == "model") c.model = model_config_from_json(v);
        else if (key == "pretrain") c.pretrain = train_config_from_json(v, c.pretrain);
        else if (key == "finetune") c.finetune = train_config_from_json(v, c.finetune);
        else if (key == "sweep") c.sweep = detail::sweep_section_from_json(v, c.sweep);
        else throw ValidationError("unknown run config section '" + key + "'");
    }
    c.validate();
    return c;
}

inline RunConfigFile load_run_config(const std::string& path) {
    if (path.empty()) return RunConfigFile{};
    const std::string text = io::read_text_file(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError(path + ": invalid JSON: " + e.what());
    }
    return run_config_from_json(j);
}

}  // namespace mp3sleep
