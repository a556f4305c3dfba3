#pragma once

// Checkpoint container: a JSON document holding the architecture, the
// adaptor layout, the TrainConfig and FreezePolicy of the run, and every
// parameter block as {name, group, rows, cols, data (row-major)}.
//
// {
//   "format": "peft-ser-checkpoint", "version": 1,
//   "arch": {...}, "task": "classification",
//   "adapters": {"ba": true, "lora": true, "ws": true, "wg": true, "bottleneck": 16, "rank": 4},
//   "train_config": {...}, "freeze_policy": {...},
//   "blocks": [{"name": "encoder.frontend.w", "group": "frontend", "rows": 64, "cols": 20, "data": [...]}, ...]
// }
//
// Doubles are written in shortest round-trip form, so a load restores every block bit-for-bit.

#include "peft/adapters.hpp"
#include "peft/arch.hpp"
#include "peft/encoder.hpp"
#include "peft/training.hpp"

#include <nlohmann/json.hpp>

#include <cctype>
#include <fstream>
#include <map>
#include <string>

namespace peft {

using Json = nlohmann::ordered_json;

inline constexpr const char* kCheckpointFormat = "peft-ser-checkpoint";
inline constexpr int kCheckpointVersion = 1;

inline Json to_json(const ArchShape& a) {
    return Json{{"name", a.name},      {"layers", a.layers},           {"d_model", a.d_model},
                {"heads", a.heads},    {"d_ff", a.d_ff},               {"in_features", a.in_features},
                {"max_frames", a.max_frames}};
}

inline ArchShape arch_from_json(const nlohmann::json& j) {
    ArchShape a;
    a.name = j.value("name", std::string("custom"));
    a.layers = j.at("layers").get<int>();
    a.d_model = j.at("d_model").get<int>();
    a.heads = j.at("heads").get<int>();
    a.d_ff = j.at("d_ff").get<int>();
    a.in_features = j.at("in_features").get<int>();
    a.max_frames = j.at("max_frames").get<int>();
    return a;
}

inline Json to_json(const TrainConfig& c) {
    return Json{{"task", to_string(c.task)},
                {"epochs", c.epochs},
                {"lr", c.lr},
                {"batch_size", c.batch_size},
                {"seed", c.seed},
                {"regression_loss", c.regression_loss == RegressionLoss::ccc ? "ccc" : "mse"}};
}

inline Task parse_task(const std::string& s) {
    if (s == "classification") return Task::classification;
    if (s == "regression") return Task::regression;
    throw ConfigError("unknown task '" + s + "'");
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.task = parse_task(j.at("task").get<std::string>());
    c.epochs = j.at("epochs").get<int>();
    c.lr = j.at("lr").get<double>();
    c.batch_size = j.at("batch_size").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    const auto loss = j.value("regression_loss", std::string("ccc"));
    if (loss != "ccc" && loss != "mse") throw ConfigError("unknown regression_loss '" + loss + "'");
    c.regression_loss = loss == "ccc" ? RegressionLoss::ccc : RegressionLoss::mse;
    return c;
}

inline Json to_json(const FreezePolicy& p) {
    Json j{{"mode", to_string(p.mode)}};
    for (auto k : kAdapterKinds) {
        std::string key = to_string(k);
        for (auto& ch : key) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        j[key] = to_string(p.of(k));
    }
    return j;
}

inline FreezePolicy freeze_policy_from_json(const nlohmann::json& j) {
    FreezePolicy p;
    const auto mode = parse_mode(j.at("mode").get<std::string>());
    if (!mode) throw ConfigError("unknown mode '" + j.at("mode").get<std::string>() + "'");
    p.mode = *mode;
    for (auto k : kAdapterKinds) {
        std::string key = to_string(k);
        for (auto& ch : key) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        const auto u = parse_update(j.value(key, std::string("absent")));
        if (!u) throw ConfigError("unknown update flag for " + key);
        p.of(k) = *u;
    }
    return p;
}

inline Json to_json(const Matrix& m) {
    Json data = Json::array();
    for (Index r = 0; r < m.rows(); ++r) {
        for (Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
    }
    return data;
}

inline Json checkpoint_json(const Model& model, const TrainConfig& cfg, const FreezePolicy& policy) {
    Json j;
    j["format"] = kCheckpointFormat;
    j["version"] = kCheckpointVersion;
    j["arch"] = to_json(model.arch);
    j["task"] = to_string(model.head.task);
    const auto& as = model.adapters;
    j["adapters"] = Json{{"ba", as.use_ba},
                         {"lora", as.use_lora},
                         {"ws", as.use_ws},
                         {"wg", as.use_wg},
                         {"bottleneck", as.use_ba ? as.ba.front().bottleneck() : 0},
                         {"rank", as.use_lora ? as.lora.front()[0].rank() : 0}};
    j["train_config"] = to_json(cfg);
    j["freeze_policy"] = to_json(policy);
    Json blocks = Json::array();
    visit_params(model, [&](const std::string& name, ParamGroup g, const Matrix& m) {
        blocks.push_back(Json{{"name", name},
                              {"group", to_string(g)},
                              {"rows", m.rows()},
                              {"cols", m.cols()},
                              {"data", to_json(m)}});
    });
    j["blocks"] = std::move(blocks);
    return j;
}

struct Checkpoint {
    Model model;
    TrainConfig config;
    FreezePolicy policy;
};

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
    try {
        if (j.at("format").get<std::string>() != kCheckpointFormat) throw ParseError("not a checkpoint");
        if (j.at("version").get<int>() != kCheckpointVersion) throw ParseError("unsupported checkpoint version");
        Checkpoint ck;
        const ArchShape arch = arch_from_json(j.at("arch"));
        arch.validate();
        const auto& a = j.at("adapters");
        AdapterConfig acfg;
        acfg.ba = a.at("ba").get<bool>();
        acfg.lora = a.at("lora").get<bool>();
        acfg.ws = a.at("ws").get<bool>();
        acfg.wg = a.at("wg").get<bool>();
        if (acfg.ba) acfg.bottleneck = a.at("bottleneck").get<int>();
        if (acfg.lora) acfg.rank = a.at("rank").get<int>();
        ck.model = Model::create(arch, acfg, parse_task(j.at("task").get<std::string>()), 0);
        ck.config = train_config_from_json(j.at("train_config"));
        ck.policy = freeze_policy_from_json(j.at("freeze_policy"));

        std::map<std::string, const nlohmann::json*> by_name;
        for (const auto& b : j.at("blocks")) by_name[b.at("name").get<std::string>()] = &b;
        std::size_t used = 0;
        visit_params(ck.model, [&](const std::string& name, ParamGroup, Matrix& m) {
            const auto it = by_name.find(name);
            if (it == by_name.end()) throw ParseError("checkpoint is missing block " + name);
            const auto& b = *it->second;
            const auto rows = b.at("rows").get<Index>();
            const auto cols = b.at("cols").get<Index>();
            if (rows != m.rows() || cols != m.cols()) {
                throw ParseError("block " + name + " has shape " + std::to_string(rows) + "x" + std::to_string(cols) +
                                 ", expected " + shape_str(m));
            }
            const auto& data = b.at("data");
            if (static_cast<Index>(data.size()) != rows * cols) throw ParseError("block " + name + " has wrong length");
            for (Index r = 0; r < rows; ++r) {
                for (Index c = 0; c < cols; ++c) m(r, c) = data[static_cast<std::size_t>(r * cols + c)].get<double>();
            }
            ++used;
        });
        if (used != by_name.size()) throw ParseError("checkpoint has blocks the model does not define");
        return ck;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("checkpoint: ") + e.what());
    } catch (const ConfigError& e) {
        throw ParseError(std::string("checkpoint: ") + e.what());
    }
}

inline void save_checkpoint(const std::string& path, const Model& model, const TrainConfig& cfg,
                            const FreezePolicy& policy) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    os << checkpoint_json(model, cfg, policy).dump() << '\n';
    if (!os) throw std::runtime_error("write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("checkpoint: ") + e.what());
    }
    return checkpoint_from_json(j);
}

} // namespace peft
