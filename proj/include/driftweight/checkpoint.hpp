#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "driftweight/errors.hpp"
#include "driftweight/nn.hpp"
#include "driftweight/scorer.hpp"
#include "driftweight/timescale.hpp"

namespace driftweight {

// Self-describing single-file JSON checkpoint: model parameters, the full
// importance model (scorer included), and the age normalizer.

inline void to_json(nlohmann::json& j, const ModelParams& p) {
    j = {{"layer_sizes", p.layer_sizes},
         {"activation", p.activation == HiddenActivation::relu ? "relu" : "tanh"},
         {"values", p.values}};
}

inline void from_json(const nlohmann::json& j, ModelParams& p) {
    j.at("layer_sizes").get_to(p.layer_sizes);
    p.activation = j.at("activation").get<std::string>() == "tanh" ? HiddenActivation::tanh
                                                                   : HiddenActivation::relu;
    j.at("values").get_to(p.values);
    if (p.values.size() != param_count(p.layer_sizes)) {
        throw DataError("checkpoint: parameter vector length does not match layer sizes");
    }
}

inline void to_json(nlohmann::json& j, const TimescaleBasis& b) {
    j = {{"a0", b.a0}, {"K", b.K}};
}

inline void from_json(const nlohmann::json& j, TimescaleBasis& b) {
    b = make_basis(j.at("a0").get<double>(), j.at("K").get<int>());
}

inline void to_json(nlohmann::json& j, const AgeNormalizer& n) {
    j = {{"t_end", n.t_end}, {"window", n.window}};
}

inline void from_json(const nlohmann::json& j, AgeNormalizer& n) {
    j.at("t_end").get_to(n.t_end);
    j.at("window").get_to(n.window);
}

inline void to_json(nlohmann::json& j, const ImportanceModel& m) {
    j = {{"variant", scheme_name(m.scheme)},
         {"basis", m.basis},
         {"lambda", m.lambda},
         {"slope", m.slope},
         {"z", m.z}};
    if (scheme_uses_scorer(m.scheme)) {
        j["scorer"] = m.scorer.net;
    } else {
        j["scorer"] = nullptr;
    }
}

inline void from_json(const nlohmann::json& j, ImportanceModel& m) {
    m.scheme = scheme_from_name(j.at("variant").get<std::string>());
    j.at("basis").get_to(m.basis);
    j.at("lambda").get_to(m.lambda);
    j.at("slope").get_to(m.slope);
    j.at("z").get_to(m.z);
    if (j.contains("scorer") && !j.at("scorer").is_null()) {
        j.at("scorer").get_to(m.scorer.net);
    }
    m.validate();
}

struct Checkpoint {
    ModelParams theta;
    ImportanceModel model;
    AgeNormalizer normalizer;
    Task task = Task::classification;
    nlohmann::json config;  // resolved RunConfig document
};

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    nlohmann::json j = {{"format", "driftweight-checkpoint-v1"},
                        {"task", ckpt.task == Task::classification ? "classification"
                                                                   : "regression"},
                        {"theta", ckpt.theta},
                        {"importance", ckpt.model},
                        {"normalizer", ckpt.normalizer},
                        {"config", ckpt.config}};
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint '" + path + "'");
    out << j.dump(2) << '\n';
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open checkpoint '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& err) {
        throw DataError("checkpoint '" + path + "' is not valid JSON: " + err.what());
    }
    try {
        if (j.at("format").get<std::string>() != "driftweight-checkpoint-v1") {
            throw DataError("unrecognized checkpoint format");
        }
        Checkpoint ckpt;
        ckpt.task = j.at("task").get<std::string>() == "regression" ? Task::regression
                                                                    : Task::classification;
        j.at("theta").get_to(ckpt.theta);
        j.at("importance").get_to(ckpt.model);
        j.at("normalizer").get_to(ckpt.normalizer);
        ckpt.config = j.value("config", nlohmann::json::object());
        return ckpt;
    } catch (const nlohmann::json::exception& err) {
        throw DataError("malformed checkpoint '" + path + "': " + err.what());
    }
}

}  // namespace driftweight
