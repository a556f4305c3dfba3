#pragma once

// Experiment configuration: one JSON document, validated in full before any
// compute runs. Unknown keys are rejected at every level.
//
// {
//   "seed": 0,
//   "out": "runs/demo",
//   "data_dir": "runs/demo/data",
//   "arch": "toy",                      // or {"layers": 4, "d_model": 64, ...}
//   "adapters": {"bottleneck": 16, "rank": 4, "gate_init": 0.0},
//   "corpus": {"acted": {...}, "natural": {...}},
//   "train": {"task": "classification", "epochs": 20, "lr": 5e-4, "batch_size": 32},
//   "policies": ["PT", "FT", {"mode": "PEFT", "ba": "updated", "lora": "updated", "ws": "updated", "wg": "updated"}],
//   "plan": {"source": "acted", "target": "natural", "stage2_freeze": {"ba": true, "lora": true}, "seeds": [0, 1, 2, 3, 4]},
//   "pretrain": {"epochs": 2, "lr": 1e-3, "mask_ratio": 0.15, "batch_size": 32},
//   "fold": 1,                          // omit for all folds
//   "jobs": 1
// }

#include "peft/adaptation.hpp"
#include "peft/arch.hpp"
#include "peft/checkpoint.hpp"
#include "peft/data.hpp"
#include "peft/pretrain.hpp"
#include "peft/training.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <initializer_list>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace peft {

struct ExperimentConfig {
    std::uint64_t seed = 0;
    std::string out = "runs";
    std::string data_dir;  // empty: <out>/data
    ArchShape arch = presets::toy();
    int bottleneck = 16;
    int rank = 4;
    double gate_init = 0.0;
    CorpusSpec acted = CorpusSpec::acted(0);
    CorpusSpec natural = CorpusSpec::natural(0);
    TrainConfig train;
    std::optional<double> lr;  // unset: per-mode default
    std::vector<FreezePolicy> policies;
    StagePlan plan;
    PretrainConfig pretrain;
    std::optional<int> fold;
    int jobs = 1;

    std::string corpus_dir() const { return data_dir.empty() ? out + "/data" : data_dir; }

    const CorpusSpec& corpus(const std::string& id) const {
        if (id == "acted") return acted;
        if (id == "natural") return natural;
        throw ConfigError("unknown corpus id '" + id + "' (expected acted or natural)");
    }

    /// Adaptor layout implied by a policy: a kind is allocated unless the policy marks it absent.
    AdapterConfig adapters_for(const FreezePolicy& p) const {
        AdapterConfig a;
        a.ba = p.of(AdapterKind::ba) != Update::absent;
        a.lora = p.of(AdapterKind::lora) != Update::absent;
        a.ws = p.of(AdapterKind::ws) != Update::absent;
        a.wg = p.of(AdapterKind::wg) != Update::absent;
        a.bottleneck = bottleneck;
        a.rank = rank;
        a.gate_init = gate_init;
        return a;
    }

    TrainConfig train_for(const FreezePolicy& p) const {
        TrainConfig c = train;
        c.lr = lr ? *lr : TrainConfig::default_lr(p.mode);
        return c;
    }

    void validate() const {
        arch.validate();
        acted.validate();
        natural.validate();
        if (acted.features != arch.in_features || natural.features != arch.in_features) {
            throw ConfigError("corpus features must equal arch in_features (" + std::to_string(arch.in_features) + ")");
        }
        if (acted.max_frames > arch.max_frames || natural.max_frames > arch.max_frames) {
            throw ConfigError("corpus max_frames exceeds arch max_frames");
        }
        TrainConfig t = train;
        if (lr) t.lr = *lr;
        t.validate();
        pretrain.validate();
        if (policies.empty()) throw ConfigError("policies: at least one policy is required");
        for (const auto& p : policies) {
            if (p.mode != TrainMode::PEFT) continue;
            const auto a = adapters_for(p);
            if (a.ba && (bottleneck < 1 || bottleneck > arch.d_model / 2)) {
                throw ConfigError("adapters.bottleneck must be in [1, d/2]");
            }
            if (a.lora && (rank < 1 || rank >= arch.d_model)) throw ConfigError("adapters.rank must be in [1, d)");
        }
        if (fold && (*fold < 1 || *fold > std::min(acted.sessions, natural.sessions))) {
            throw ConfigError("fold " + std::to_string(*fold) + " is out of range");
        }
        if (jobs < 1) throw ConfigError("jobs must be >= 1");
        corpus(plan.source_id);
        corpus(plan.target_id);
        if (plan.source_id == plan.target_id) throw ConfigError("plan: source and target must differ");
        if (plan.seeds.empty()) throw ConfigError("plan: seeds must be non-empty");
    }
};

namespace config_detail {

inline void reject_unknown(const nlohmann::json& j, std::string_view where, std::initializer_list<std::string_view> keys) {
    if (!j.is_object()) throw ConfigError(std::string(where) + ": expected an object");
    for (const auto& [k, v] : j.items()) {
        bool ok = false;
        for (auto allowed : keys) ok = ok || k == allowed;
        if (!ok) throw ConfigError(std::string(where) + ": unknown key '" + k + "'");
    }
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

inline void read_corpus(const nlohmann::json& j, const std::string& where, CorpusSpec& s) {
    reject_unknown(j, where,
                   {"n_per_class", "sessions", "min_frames", "max_frames", "features", "gain", "noise_sigma",
                    "utterance_ratio", "class_scale", "session_scale", "vad_noise", "domain_shift", "seed"});
    const int old_features = s.features;
    read(j, "n_per_class", s.n_per_class);
    read(j, "sessions", s.sessions);
    read(j, "min_frames", s.min_frames);
    read(j, "max_frames", s.max_frames);
    read(j, "features", s.features);
    read(j, "gain", s.gain);
    read(j, "noise_sigma", s.noise_sigma);
    read(j, "utterance_ratio", s.utterance_ratio);
    read(j, "class_scale", s.class_scale);
    read(j, "session_scale", s.session_scale);
    read(j, "vad_noise", s.vad_noise);
    read(j, "seed", s.seed);
    if (j.contains("domain_shift")) {
        const auto& d = j.at("domain_shift");
        s.domain_shift = d.is_null() ? std::vector<double>{} : d.get<std::vector<double>>();
    } else if (s.domain == Domain::natural && (s.features != old_features || j.contains("seed"))) {
        s.domain_shift = CorpusSpec::default_shift(s.features, s.seed);
    }
}

inline FreezePolicy read_policy(const nlohmann::json& j) {
    if (j.is_string()) {
        const auto name = j.get<std::string>();
        if (name == "PT") return FreezePolicy::pt();
        if (name == "FT") return FreezePolicy::ft();
        if (name == "PEFT") return StagePlan::stage1_policy();
        throw ConfigError("policies: unknown shorthand '" + name + "'");
    }
    reject_unknown(j, "policies[]", {"mode", "ba", "lora", "ws", "wg"});
    return freeze_policy_from_json(j);
}

} // namespace config_detail

/// Parses and validates a config document. `seed_override` replaces the top-level seed and every
/// seed derived from it.
inline ExperimentConfig parse_config(const nlohmann::json& j, std::optional<std::uint64_t> seed_override = {}) {
    using namespace config_detail;
    ExperimentConfig c;
    try {
        reject_unknown(j, "config",
                       {"seed", "out", "data_dir", "arch", "adapters", "corpus", "train", "policies", "plan",
                        "pretrain", "fold", "jobs"});
        read(j, "seed", c.seed);
        if (seed_override) c.seed = *seed_override;
        read(j, "out", c.out);
        read(j, "data_dir", c.data_dir);

        if (j.contains("arch")) {
            const auto& a = j.at("arch");
            if (a.is_string()) {
                const auto p = presets::by_name(a.get<std::string>());
                if (!p) throw ConfigError("arch: unknown preset '" + a.get<std::string>() + "'");
                c.arch = *p;
            } else {
                reject_unknown(a, "arch", {"name", "layers", "d_model", "heads", "d_ff", "in_features", "max_frames"});
                c.arch = arch_from_json(a);
            }
        }

        if (j.contains("adapters")) {
            const auto& a = j.at("adapters");
            reject_unknown(a, "adapters", {"bottleneck", "rank", "gate_init"});
            read(a, "bottleneck", c.bottleneck);
            read(a, "rank", c.rank);
            read(a, "gate_init", c.gate_init);
        }

        c.acted = CorpusSpec::acted(c.seed);
        c.natural = CorpusSpec::natural(c.seed);
        if (j.contains("corpus")) {
            const auto& cj = j.at("corpus");
            reject_unknown(cj, "corpus", {"acted", "natural"});
            if (cj.contains("acted")) read_corpus(cj.at("acted"), "corpus.acted", c.acted);
            if (cj.contains("natural")) read_corpus(cj.at("natural"), "corpus.natural", c.natural);
        }

        c.train.seed = c.seed;
        if (j.contains("train")) {
            const auto& t = j.at("train");
            reject_unknown(t, "train", {"task", "epochs", "lr", "batch_size", "seed", "regression_loss"});
            if (t.contains("task")) c.train.task = parse_task(t.at("task").get<std::string>());
            read(t, "epochs", c.train.epochs);
            read(t, "batch_size", c.train.batch_size);
            if (!seed_override) read(t, "seed", c.train.seed);
            if (t.contains("lr")) c.lr = t.at("lr").get<double>();
            if (t.contains("regression_loss")) {
                const auto s = t.at("regression_loss").get<std::string>();
                if (s != "ccc" && s != "mse") throw ConfigError("train.regression_loss: expected ccc or mse");
                c.train.regression_loss = s == "ccc" ? RegressionLoss::ccc : RegressionLoss::mse;
            }
        }

        if (j.contains("policies")) {
            for (const auto& p : j.at("policies")) c.policies.push_back(read_policy(p));
        } else {
            c.policies.push_back(StagePlan::stage1_policy());
        }

        c.plan.seeds = {c.seed, c.seed + 1, c.seed + 2, c.seed + 3, c.seed + 4};
        if (j.contains("plan")) {
            const auto& p = j.at("plan");
            reject_unknown(p, "plan", {"source", "target", "stage2_freeze", "seeds"});
            read(p, "source", c.plan.source_id);
            read(p, "target", c.plan.target_id);
            if (p.contains("stage2_freeze")) {
                const auto& f = p.at("stage2_freeze");
                reject_unknown(f, "plan.stage2_freeze", {"ba", "lora"});
                read(f, "ba", c.plan.stage2_freeze.ba);
                read(f, "lora", c.plan.stage2_freeze.lora);
            }
            if (!seed_override) read(p, "seeds", c.plan.seeds);
        }

        if (j.contains("pretrain")) {
            const auto& p = j.at("pretrain");
            reject_unknown(p, "pretrain", {"epochs", "lr", "mask_ratio", "batch_size"});
            read(p, "epochs", c.pretrain.epochs);
            read(p, "lr", c.pretrain.lr);
            read(p, "mask_ratio", c.pretrain.mask_ratio);
            read(p, "batch_size", c.pretrain.batch_size);
        }

        if (j.contains("fold") && !j.at("fold").is_null()) c.fold = j.at("fold").get<int>();
        read(j, "jobs", c.jobs);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

inline ExperimentConfig load_config(const std::string& path, std::optional<std::uint64_t> seed_override = {}) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config " + path + ": " + e.what());
    }
    return parse_config(j, seed_override);
}

} // namespace peft
