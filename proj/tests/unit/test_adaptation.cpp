#include "peft/adaptation.hpp"

#include <gtest/gtest.h>

using namespace peft;

namespace {

CorpusSpec shrink(CorpusSpec spec) {
    spec.features = 6;
    spec.n_per_class = 25;
    spec.min_frames = 3;
    spec.max_frames = 6;
    if (!spec.domain_shift.empty()) spec.domain_shift = CorpusSpec::default_shift(spec.features, spec.seed);
    return spec;
}

AdaptationSetup small_setup() {
    AdaptationSetup s;
    s.arch = {"small", 2, 16, 2, 32, 6, 12};
    s.bottleneck = 4;
    s.rank = 2;
    s.source = generate_corpus(shrink(CorpusSpec::acted(11)));
    s.target = generate_corpus(shrink(CorpusSpec::natural(11)));
    s.pretrain.epochs = 1;
    return s;
}

TrainConfig small_train() {
    TrainConfig c;
    c.epochs = 3;
    c.lr = 2e-3;
    c.batch_size = 16;
    return c;
}

const StageOne& stage_one() {
    static const StageOne s1 = run_stage1(small_setup(), small_train(), 0);
    return s1;
}

} // namespace

TEST(Adaptation, StageTwoFreezeKeepsFrozenGroupsBitIdentical) {
    const StageOne& s1 = stage_one();
    for (const auto& mask : all_stage2_masks()) {
        TrainConfig c = small_train();
        c.seed = s1.seed + 1;
        const auto r = train(s1.model, s1.target.train, s1.target.val, c, StagePlan::stage2_policy(mask));
        EXPECT_EQ(group_checksum(r.model, ParamGroup::ba) == group_checksum(s1.model, ParamGroup::ba), mask.ba);
        EXPECT_EQ(group_checksum(r.model, ParamGroup::lora) == group_checksum(s1.model, ParamGroup::lora), mask.lora);
        EXPECT_EQ(group_checksum(r.model, ParamGroup::block), group_checksum(s1.model, ParamGroup::block));
        EXPECT_EQ(group_checksum(r.model, ParamGroup::frontend), group_checksum(s1.model, ParamGroup::frontend));
    }
}

TEST(Adaptation, ZeroEpochStageTwoReproducesStageOne) {
    const StageOne& s1 = stage_one();
    TrainConfig c = small_train();
    c.epochs = 0;
    const auto rep = run_stage2(s1, {true, true}, c);
    EXPECT_EQ(rep.stage2_checksum, rep.stage1_checksum);
    EXPECT_EQ(rep.stage2_source, s1.source_metric);
    EXPECT_EQ(rep.stage2_target, s1.target_metric);
    EXPECT_EQ(rep.forgetting, 0.0);
}

TEST(Adaptation, ReportIntegrity) {
    const StageOne& s1 = stage_one();
    const auto rep = run_stage2(s1, {false, true}, small_train());
    EXPECT_EQ(rep.zero_shot_target, s1.target_metric);
    EXPECT_EQ(rep.stage1_source, s1.source_metric);
    EXPECT_NEAR(rep.forgetting, rep.stage1_source - rep.stage2_source, 1e-12);
    EXPECT_EQ(rep.stage1_checksum, model_checksum(s1.model));
    EXPECT_EQ(rep.stage2_freeze, (Stage2Freeze{false, true}));
}

TEST(Adaptation, StageOnePolicyUpdatesEverything) {
    const auto p = StagePlan::stage1_policy();
    EXPECT_EQ(p.mode, TrainMode::PEFT);
    for (auto k : kAdapterKinds) EXPECT_EQ(p.of(k), Update::updated);
    const auto q = StagePlan::stage2_policy({true, false});
    EXPECT_EQ(q.of(AdapterKind::ba), Update::frozen);
    EXPECT_EQ(q.of(AdapterKind::lora), Update::updated);
    EXPECT_EQ(q.of(AdapterKind::ws), Update::updated);
    EXPECT_EQ(q.of(AdapterKind::wg), Update::updated);
}

TEST(Adaptation, MismatchedCorporaRejected) {
    AdaptationSetup s = small_setup();
    s.target = generate_corpus(CorpusSpec::natural(1));
    EXPECT_THROW(run_stage1(s, small_train(), 0), ConfigError);
    s.target = Corpus{};
    EXPECT_THROW(run_stage1(s, small_train(), 0), InputError);
}

TEST(Adaptation, FreezeMatrixLayout) {
    const auto setup = small_setup();
    TrainConfig c = small_train();
    c.epochs = 2;
    const auto fm = freeze_matrix(setup, StagePlan{}, c, 0);
    ASSERT_EQ(fm.rows.size(), 6u);
    ASSERT_EQ(fm.reports.size(), 4u);
    EXPECT_EQ(fm.rows[0].stage, 1);
    EXPECT_EQ(fm.rows[0].target, "acted");
    EXPECT_TRUE(fm.rows[0].target_zero_shot);
    EXPECT_EQ(fm.rows[1].target, "natural");
    EXPECT_TRUE(fm.rows[1].source_zero_shot);
    const auto masks = all_stage2_masks();
    for (std::size_t i = 0; i < 4; ++i) {
        const auto& row = fm.rows[2 + i];
        EXPECT_EQ(row.stage, 2);
        EXPECT_EQ(row.updated[0], !masks[i].ba);
        EXPECT_EQ(row.updated[1], !masks[i].lora);
        EXPECT_TRUE(row.updated[2]);
        EXPECT_TRUE(row.updated[3]);
        EXPECT_EQ(row.stage1_checksum, fm.rows[0].stage1_checksum);
        EXPECT_EQ(fm.reports[i].zero_shot_target, fm.rows[0].target_metric);
        EXPECT_EQ(row.target_metric, fm.reports[i].stage2_target);
    }
}
