#include "peft/data.hpp"
#include "peft/encoder.hpp"
#include "peft/pretrain.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace peft;

namespace {

Matrix random_frames(Index T, Index F, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    return Matrix::NullaryExpr(T, F, [&] { return n(rng); });
}

/// Hash of values rounded to 1e-9, so the pin survives last-bit differences between builds.
std::uint64_t rounded_hash(const std::vector<Matrix>& states) {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& s : states) {
        for (Index i = 0; i < s.size(); ++i) {
            const long long q = std::llround(s.data()[i] * 1e9);
            for (int b = 0; b < 8; ++b) {
                h ^= static_cast<unsigned char>(q >> (8 * b));
                h *= 1099511628211ULL;
            }
        }
    }
    return h;
}

} // namespace

TEST(ArchShape, PresetsValidate) {
    for (const auto& name : presets::names()) {
        const auto a = presets::by_name(name);
        ASSERT_TRUE(a.has_value()) << name;
        EXPECT_NO_THROW(a->validate());
        EXPECT_EQ(a->d_model % a->heads, 0);
    }
    EXPECT_FALSE(presets::by_name("bert").has_value());
    ArchShape bad = presets::toy();
    bad.heads = 5;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = presets::toy();
    bad.d_ff = 32;
    EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Encoder, NoAdaptorsMatchesBaseBitForBit) {
    const ArchShape arch = presets::toy();
    const auto params = EncoderParams::init(arch, 3);
    std::mt19937_64 rng(1);
    const Matrix x = random_frames(10, arch.in_features, rng);
    Model base;
    base.arch = arch;
    base.encoder = params;
    const auto a = encode(x, base);
    const auto b = encode(x, arch, params, AdapterSet::create(arch, AdapterConfig::none(), 9));
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t l = 0; l < a.size(); ++l) EXPECT_TRUE(bit_identical(a[l], b[l]));
}

TEST(Encoder, IdentityAtInit) {
    const ArchShape arch = presets::toy();
    const auto params = EncoderParams::init(arch, 4);
    const AdapterSet fresh = AdapterSet::create(arch, {true, true, false, false, 16, 4, 0.0}, 5);
    const AdapterSet none = AdapterSet::create(arch, AdapterConfig::none(), 5);
    std::mt19937_64 rng(2);
    std::uniform_int_distribution<int> len(1, arch.max_frames);
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
        const Matrix x = random_frames(len(rng), arch.in_features, rng);
        const auto a = encode(x, arch, params, fresh);
        const auto b = encode(x, arch, params, none);
        for (std::size_t l = 0; l < a.size(); ++l) worst = std::max(worst, (a[l] - b[l]).cwiseAbs().maxCoeff());
    }
    EXPECT_LT(worst, 1e-6);
}

TEST(Encoder, GoldenChecksum) {
    const ArchShape arch = presets::toy();
    const Model m = Model::create(arch, AdapterConfig::none(), Task::classification, 0);
    std::mt19937_64 rng(0);
    const Matrix x = random_frames(12, arch.in_features, rng);
    const auto states = encode(x, m);
    ASSERT_EQ(states.size(), 4u);
    EXPECT_EQ(rounded_hash(states), 10649684018867185597ULL) << "toy encoder hidden states changed";
}

TEST(Encoder, AttentionRowsSumToOne) {
    const ArchShape arch = presets::toy();
    Model m = Model::create(arch, AdapterConfig::all(16, 4), Task::classification, 6);
    std::mt19937_64 rng(3);
    for (auto& f : m.adapters.lora[1]) f.B = random_frames(arch.d_model, 4, rng);
    const Matrix x = random_frames(9, arch.in_features, rng);
    for (int layer = 0; layer < arch.layers; ++layer) {
        const auto maps = attention_maps(m, x, layer);
        ASSERT_EQ(static_cast<int>(maps.size()), arch.heads);
        for (const auto& p : maps) {
            EXPECT_EQ(p.rows(), 9);
            EXPECT_LT((p.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-6);
        }
    }
}

TEST(Encoder, InputErrors) {
    const Model m = Model::create(presets::toy(), AdapterConfig::none(), Task::classification, 0);
    EXPECT_THROW(encode(Matrix(0, 20), m), InputError);
    EXPECT_THROW(encode(Matrix::Ones(3, 19), m), InputError);
    EXPECT_THROW(encode(Matrix::Ones(65, 20), m), InputError);
}

TEST(Encoder, PerUtteranceOutputIndependentOfOrder) {
    const Model m = Model::create(presets::toy(), AdapterConfig::all(16, 4), Task::regression, 2);
    std::mt19937_64 rng(4);
    std::vector<Matrix> xs;
    for (int i = 0; i < 6; ++i) xs.push_back(random_frames(5 + i, 20, rng));
    std::vector<RowVector> forward, backward(xs.size());
    for (const auto& x : xs) forward.push_back(predict(m, x));
    for (std::size_t i = xs.size(); i-- > 0;) backward[i] = predict(m, xs[i]);
    for (std::size_t i = 0; i < xs.size(); ++i) EXPECT_TRUE(bit_identical(forward[i], backward[i]));
}

TEST(Pooling, SingleFrameIsIdentity) {
    const AdapterSet none;
    const std::vector<Matrix> states{Matrix::Ones(1, 4), (Matrix(1, 4) << 1, 2, 3, 4).finished()};
    EXPECT_TRUE(bit_identical(pooled_features(states, none), states.back()));
}

TEST(Pooling, OneHotWeightedSumMatchesLastLayer) {
    const ArchShape arch = presets::toy();
    Model m = Model::create(arch, {false, false, true, false, 16, 4, 0.0}, Task::classification, 1);
    m.adapters.ws.w << -40, -40, -40, 40;
    std::mt19937_64 rng(5);
    const auto states = encode(random_frames(7, arch.in_features, rng), m);
    AdapterSet off;
    const RowVector a = pooled_features(states, m.adapters);
    const RowVector b = pooled_features(states, off);
    EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Head, OutputWidths) {
    const ArchShape arch = presets::toy();
    std::mt19937_64 rng(6);
    const Matrix x = random_frames(4, arch.in_features, rng);
    EXPECT_EQ(predict(Model::create(arch, AdapterConfig::none(), Task::classification, 0), x).size(), 4);
    EXPECT_EQ(predict(Model::create(arch, AdapterConfig::none(), Task::regression, 0), x).size(), 3);
}

TEST(Pretrain, ZeroEpochsReturnsParamsUnchanged) {
    const ArchShape arch = presets::toy();
    const auto params = EncoderParams::init(arch, 7);
    CorpusSpec spec = CorpusSpec::acted(1);
    spec.n_per_class = 10;
    PretrainConfig cfg;
    cfg.epochs = 0;
    const auto out = pretrain_base(arch, params, generate_corpus(spec), cfg);
    EXPECT_TRUE(bit_identical(out.frontend_w, params.frontend_w));
    for (std::size_t l = 0; l < params.blocks.size(); ++l) {
        EXPECT_TRUE(bit_identical(out.blocks[l].wq, params.blocks[l].wq));
        EXPECT_TRUE(bit_identical(out.blocks[l].w2, params.blocks[l].w2));
    }
}

TEST(Pretrain, EmptyCorpusIsInputError) {
    const ArchShape arch = presets::toy();
    EXPECT_THROW(pretrain_base(arch, EncoderParams::init(arch, 0), Corpus{}, PretrainConfig{}), InputError);
}

TEST(Pretrain, ReducesHeldOutReconstructionError) {
    const ArchShape arch = presets::toy();
    CorpusSpec spec = CorpusSpec::acted(2);
    spec.n_per_class = 40;
    const auto split = split_losso(generate_corpus(spec), 1);
    PretrainConfig cfg;
    cfg.seed = 3;
    const auto init = EncoderParams::init(arch, 3);
    const double before = reconstruction_error(arch, init, ReconstructionHead::init(arch, cfg.seed), split.test, cfg);
    PretrainReport report;
    const auto trained = pretrain_base(arch, init, split.train, cfg, &report);
    const double after = reconstruction_error(arch, trained, report.recon, split.test, cfg);
    EXPECT_LT(after, before);
    ASSERT_EQ(report.epoch_loss.size(), 2u);
}

TEST(Pretrain, Deterministic) {
    const ArchShape arch = presets::toy();
    CorpusSpec spec = CorpusSpec::natural(4);
    spec.n_per_class = 10;
    const Corpus c = generate_corpus(spec);
    PretrainConfig cfg;
    cfg.epochs = 1;
    const auto a = pretrain_base(arch, EncoderParams::init(arch, 1), c, cfg);
    const auto b = pretrain_base(arch, EncoderParams::init(arch, 1), c, cfg);
    EXPECT_TRUE(bit_identical(a.frontend_w, b.frontend_w));
    EXPECT_TRUE(bit_identical(a.blocks.back().w1, b.blocks.back().w1));
}
