#pragma once

// Two-stage acted -> natural adaptation with selective stage-2 freezing.
//
// Stage 1 fine-tunes all four adaptor kinds on the source domain, starting
// from the pretrained base. Stage 2 continues on the target domain from the
// stage-1 parameters with BA and/or LoRA frozen; WS and WG are always updated.

#include "peft/adapters.hpp"
#include "peft/data.hpp"
#include "peft/encoder.hpp"
#include "peft/metrics.hpp"
#include "peft/pretrain.hpp"
#include "peft/training.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace peft {

struct Stage2Freeze {
    bool ba = false;
    bool lora = false;

    friend bool operator==(const Stage2Freeze&, const Stage2Freeze&) = default;
};

/// Stage-2 masks in the row order of the experiment table: (*,*), (v,*), (*,v), (v,v).
inline std::vector<Stage2Freeze> all_stage2_masks() {
    return {{true, true}, {false, true}, {true, false}, {false, false}};
}

struct StagePlan {
    std::string source_id = "acted";
    std::string target_id = "natural";
    Stage2Freeze stage2_freeze;
    std::vector<std::uint64_t> seeds{0};

    /// Stage-2 policy. WS and WG cannot be frozen.
    static FreezePolicy stage2_policy(const Stage2Freeze& f) {
        return FreezePolicy::peft(f.ba ? Update::frozen : Update::updated, f.lora ? Update::frozen : Update::updated,
                                  Update::updated, Update::updated);
    }

    static FreezePolicy stage1_policy() {
        return FreezePolicy::peft(Update::updated, Update::updated, Update::updated, Update::updated);
    }
};

/// Corpora and model settings shared by every run of an adaptation experiment.
struct AdaptationSetup {
    ArchShape arch = presets::toy();
    int bottleneck = 16;
    int rank = 4;
    Corpus source;
    Corpus target;
    int fold = 1;
    PretrainConfig pretrain;

    void validate() const {
        arch.validate();
        if (source.empty() || target.empty()) throw InputError("adaptation: source and target corpora must be non-empty");
        if (source.features() != target.features()) {
            throw ConfigError("adaptation: source has " + std::to_string(source.features()) +
                              " features but target has " + std::to_string(target.features()));
        }
        if (source.features() != arch.in_features) {
            throw ConfigError("adaptation: corpus features " + std::to_string(source.features()) +
                              " != arch F " + std::to_string(arch.in_features));
        }
    }
};

struct AdaptationReport {
    std::string source_id;
    std::string target_id;
    Stage2Freeze stage2_freeze;
    std::uint64_t seed = 0;
    double zero_shot_target = 0.0;  // stage-1 model on the target test split
    double stage1_source = 0.0;
    double stage1_target = 0.0;
    double stage2_source = 0.0;
    double stage2_target = 0.0;
    double forgetting = 0.0;        // stage1_source - stage2_source
    std::uint64_t stage1_checksum = 0;
    std::uint64_t stage2_checksum = 0;
};

/// Checksum over every parameter block in visit order.
inline std::uint64_t model_checksum(const Model& m) {
    std::uint64_t h = 1469598103934665603ULL;
    visit_params(m, [&](const std::string&, ParamGroup, const Matrix& p) { h = checksum(p, h); });
    return h;
}

/// Checksum over the blocks of one group.
inline std::uint64_t group_checksum(const Model& m, ParamGroup group) {
    std::uint64_t h = 1469598103934665603ULL;
    visit_params(m, [&](const std::string&, ParamGroup g, const Matrix& p) {
        if (g == group) h = checksum(p, h);
    });
    return h;
}

struct StageOne {
    std::uint64_t seed = 0;
    Split source;
    Split target;
    EncoderParams base;  // pretrained, shared by both stage-1 runs
    Model model;         // trained on the source domain
    double source_metric = 0.0;
    double target_metric = 0.0;  // zero-shot
    TrainHistory history;
};

inline Model fresh_adapted_model(const AdaptationSetup& setup, const EncoderParams& base, Task task, std::uint64_t seed) {
    Model m = Model::create(setup.arch, AdapterConfig::all(setup.bottleneck, setup.rank), task, seed);
    m.encoder = base;
    return m;
}

/// Pretrains the base on the unlabeled training frames of both domains, then runs stage 1 on the source.
inline StageOne run_stage1(const AdaptationSetup& setup, const TrainConfig& cfg, std::uint64_t seed) {
    setup.validate();
    StageOne s;
    s.seed = seed;
    s.source = split_losso(setup.source, setup.fold);
    s.target = split_losso(setup.target, setup.fold);

    Corpus unlabeled;
    unlabeled.name = "pretrain";
    for (const auto* c : {&s.source.train, &s.target.train}) {
        unlabeled.utterances.insert(unlabeled.utterances.end(), c->utterances.begin(), c->utterances.end());
    }
    PretrainConfig pcfg = setup.pretrain;
    pcfg.seed = seed;
    s.base = pretrain_base(setup.arch, EncoderParams::init(setup.arch, seed), unlabeled, pcfg);

    TrainConfig c1 = cfg;
    c1.seed = seed;
    auto r = train(fresh_adapted_model(setup, s.base, cfg.task, seed), s.source.train, s.source.val, c1,
                   StagePlan::stage1_policy());
    s.model = std::move(r.model);
    s.history = std::move(r.history);
    s.source_metric = selection_metric(evaluate(s.model, s.source.test), cfg.task);
    s.target_metric = selection_metric(evaluate(s.model, s.target.test), cfg.task);
    return s;
}

/// Continues from stage 1 on the target domain with the given BA/LoRA freeze.
inline AdaptationReport run_stage2(const StageOne& s1, const Stage2Freeze& freeze, const TrainConfig& cfg,
                                   const std::string& source_id = "acted", const std::string& target_id = "natural") {
    TrainConfig c2 = cfg;
    c2.seed = s1.seed + 1;
    auto r = train(s1.model, s1.target.train, s1.target.val, c2, StagePlan::stage2_policy(freeze));
    AdaptationReport rep;
    rep.source_id = source_id;
    rep.target_id = target_id;
    rep.stage2_freeze = freeze;
    rep.seed = s1.seed;
    rep.zero_shot_target = s1.target_metric;
    rep.stage1_source = s1.source_metric;
    rep.stage1_target = s1.target_metric;
    rep.stage2_source = selection_metric(evaluate(r.model, s1.source.test), cfg.task);
    rep.stage2_target = selection_metric(evaluate(r.model, s1.target.test), cfg.task);
    rep.forgetting = rep.stage1_source - rep.stage2_source;
    rep.stage1_checksum = model_checksum(s1.model);
    rep.stage2_checksum = model_checksum(r.model);
    return rep;
}

/// Full two-stage pipeline for one seed.
inline AdaptationReport run_two_stage(const AdaptationSetup& setup, const StagePlan& plan, const TrainConfig& cfg,
                                      std::uint64_t seed) {
    const StageOne s1 = run_stage1(setup, cfg, seed);
    return run_stage2(s1, plan.stage2_freeze, cfg, plan.source_id, plan.target_id);
}

/// One line of the stage table: which adaptors were updated and the score on each domain.
struct StageRow {
    int stage = 1;
    std::string source;  // "PT" for rows trained from the pretrained base
    std::string target;
    std::array<bool, 4> updated{true, true, true, true};  // BA, LoRA, WS, WG
    double source_metric = 0.0;
    double target_metric = 0.0;
    bool source_zero_shot = false;
    bool target_zero_shot = false;
    std::uint64_t stage1_checksum = 0;
};

struct FreezeMatrixResult {
    std::uint64_t seed = 0;
    std::vector<StageRow> rows;              // 2 stage-1 rows then 4 stage-2 rows
    std::vector<AdaptationReport> reports;   // one per stage-2 row
};

/// Stage 1 on each domain from the pretrained base, then all four stage-2 masks from the shared
/// source checkpoint.
inline FreezeMatrixResult freeze_matrix(const AdaptationSetup& setup, const StagePlan& plan, const TrainConfig& cfg,
                                        std::uint64_t seed) {
    FreezeMatrixResult out;
    out.seed = seed;
    const StageOne s1 = run_stage1(setup, cfg, seed);

    StageRow src;
    src.stage = 1;
    src.source = "PT";
    src.target = plan.source_id;
    src.source_metric = s1.source_metric;
    src.target_metric = s1.target_metric;
    src.target_zero_shot = true;
    src.stage1_checksum = model_checksum(s1.model);
    out.rows.push_back(src);

    TrainConfig ct = cfg;
    ct.seed = seed;
    const auto direct = train(fresh_adapted_model(setup, s1.base, cfg.task, seed), s1.target.train, s1.target.val, ct,
                              StagePlan::stage1_policy());
    StageRow tgt;
    tgt.stage = 1;
    tgt.source = "PT";
    tgt.target = plan.target_id;
    tgt.source_metric = selection_metric(evaluate(direct.model, s1.source.test), cfg.task);
    tgt.target_metric = selection_metric(evaluate(direct.model, s1.target.test), cfg.task);
    tgt.source_zero_shot = true;
    tgt.stage1_checksum = model_checksum(direct.model);
    out.rows.push_back(tgt);

    for (const auto& mask : all_stage2_masks()) {
        auto rep = run_stage2(s1, mask, cfg, plan.source_id, plan.target_id);
        StageRow row;
        row.stage = 2;
        row.source = plan.source_id;
        row.target = plan.target_id;
        row.updated = {!mask.ba, !mask.lora, true, true};
        row.source_metric = rep.stage2_source;
        row.target_metric = rep.stage2_target;
        row.stage1_checksum = rep.stage1_checksum;
        out.rows.push_back(row);
        out.reports.push_back(std::move(rep));
    }
    return out;
}

} // namespace peft
