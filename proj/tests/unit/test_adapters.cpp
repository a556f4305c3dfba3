#include "peft/adapters.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace peft;

namespace {

Matrix random_matrix(Index r, Index c, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    return Matrix::NullaryExpr(r, c, [&] { return n(rng); });
}

LoRAFactors hand_factors() {
    LoRAFactors f;
    f.A = (Matrix(1, 2) << 1, 0).finished();
    f.B = (Matrix(2, 1) << 1, 0).finished();
    return f;
}

} // namespace

TEST(LoRA, ZeroUpFactorIsExactIdentity) {
    std::mt19937_64 rng(1);
    const Matrix W = random_matrix(8, 6, rng);
    const Matrix x = random_matrix(5, 6, rng);
    const auto f = LoRAFactors::init(8, 6, 2, LoraTarget::query, rng);
    EXPECT_TRUE(f.B.isZero(0.0));
    const Matrix base = x * W.transpose();
    EXPECT_TRUE(bit_identical(lora_apply(x, W, f), base));
}

TEST(LoRA, HandExample) {
    const Matrix W = Matrix::Identity(2, 2);
    const Matrix x = (Matrix(1, 2) << 1, 1).finished();
    const auto f = hand_factors();
    const Matrix merged = lora_merge(W, f);
    EXPECT_EQ(merged, (Matrix(2, 2) << 2, 0, 0, 1).finished());
    EXPECT_EQ(lora_apply(x, W, f), (Matrix(1, 2) << 2, 1).finished());
}

TEST(LoRA, BaseWeightNeverMutated) {
    std::mt19937_64 rng(2);
    const Matrix W = random_matrix(8, 8, rng);
    const Matrix copy = W;
    auto f = LoRAFactors::init(8, 8, 2, LoraTarget::value, rng);
    f.B = random_matrix(8, 2, rng);
    (void)lora_apply(random_matrix(3, 8, rng), W, f);
    (void)lora_merge(W, f);
    EXPECT_TRUE(bit_identical(W, copy));
}

TEST(LoRA, MergeWithZeroDeltaReturnsW) {
    std::mt19937_64 rng(3);
    const Matrix W = random_matrix(8, 8, rng);
    const auto f = LoRAFactors::init(8, 8, 2, LoraTarget::key, rng);
    EXPECT_TRUE(bit_identical(lora_merge(W, f), W));
}

TEST(LoRA, MergedForwardMatchesFactoredForward) {
    std::mt19937_64 rng(4);
    const Matrix W = random_matrix(8, 8, rng);
    LoRAFactors f;
    f.A = random_matrix(2, 8, rng);
    f.B = random_matrix(8, 2, rng);
    const Matrix merged = lora_merge(W, f);
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
        const Matrix x = random_matrix(1, 8, rng);
        worst = std::max(worst, (x * merged.transpose() - lora_apply(x, W, f)).cwiseAbs().maxCoeff());
    }
    EXPECT_LT(worst, 1e-5);
}

TEST(LoRA, MergeEquivalenceOverRandomShapes) {
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<int> dim(2, 64);
    for (int trial = 0; trial < 50; ++trial) {
        const int d = dim(rng);
        const int k = dim(rng);
        const int r = std::uniform_int_distribution<int>(1, std::min(d, k) - 1)(rng);
        const Matrix W = random_matrix(d, k, rng);
        LoRAFactors f;
        f.A = random_matrix(r, k, rng);
        f.B = random_matrix(d, r, rng);
        const Matrix x = random_matrix(4, k, rng);
        const Matrix a = lora_apply(x, W, f);
        const Matrix b = x * lora_merge(W, f).transpose();
        EXPECT_LT((a - b).norm() / a.norm(), 1e-5) << "d=" << d << " k=" << k << " r=" << r;
    }
}

TEST(LoRA, RankMustBeBelowMinDim) {
    std::mt19937_64 rng(6);
    EXPECT_THROW(LoRAFactors::init(8, 4, 4, LoraTarget::query, rng), ConfigError);
    EXPECT_THROW(LoRAFactors::init(8, 8, 0, LoraTarget::query, rng), ConfigError);
    EXPECT_NO_THROW(LoRAFactors::init(8, 4, 3, LoraTarget::query, rng));
}

TEST(LoRA, ShapeMismatchNamesOperand) {
    const auto f = hand_factors();
    const Matrix W = Matrix::Identity(2, 2);
    try {
        (void)lora_apply(Matrix::Ones(1, 3), W, f);
        FAIL() << "expected DimensionError";
    } catch (const DimensionError& e) {
        EXPECT_NE(std::string(e.what()).find("x is 1x3"), std::string::npos) << e.what();
    }
    EXPECT_THROW((void)lora_merge(Matrix::Identity(3, 2), f), DimensionError);
}

TEST(LoRA, Wav2vec2BaseCount) {
    AdapterConfig c;
    c.lora = true;
    c.rank = 24;
    EXPECT_EQ(count_formula(presets::wav2vec2_base(), c).lora, 1327104);
}

TEST(Bottleneck, IdentityAtInit) {
    std::mt19937_64 rng(7);
    const auto a = BottleneckAdapter::init(16, 4, rng);
    EXPECT_TRUE(a.w_up.isZero(0.0));
    EXPECT_TRUE(a.b_up.isZero(0.0));
    const Matrix h = random_matrix(5, 16, rng);
    EXPECT_TRUE(bit_identical(bottleneck_forward(h, a), h));
}

TEST(Bottleneck, HandExample) {
    BottleneckAdapter a;
    a.w_down = (Matrix(1, 2) << 1, 1).finished();
    a.b_down = Matrix::Zero(1, 1);
    a.w_up = (Matrix(2, 1) << 1, -1).finished();
    a.b_up = Matrix::Zero(1, 2);
    const Matrix h = (Matrix(1, 2) << 1, 2).finished();
    EXPECT_EQ(bottleneck_forward(h, a, Activation::relu), (Matrix(1, 2) << 4, -1).finished());
}

TEST(Bottleneck, BottleneckAtMostHalfDim) {
    std::mt19937_64 rng(8);
    EXPECT_THROW(BottleneckAdapter::init(16, 9, rng), ConfigError);
    EXPECT_NO_THROW(BottleneckAdapter::init(16, 8, rng));
}

TEST(Bottleneck, ShapeMismatch) {
    std::mt19937_64 rng(9);
    const auto a = BottleneckAdapter::init(16, 4, rng);
    EXPECT_THROW((void)bottleneck_forward(Matrix::Ones(2, 15), a), DimensionError);
}

TEST(Bottleneck, Wav2vec2BaseCount) {
    AdapterConfig c;
    c.ba = true;
    c.bottleneck = 64;
    EXPECT_EQ(count_formula(presets::wav2vec2_base(), c).ba, 1189632);
    EXPECT_EQ(12 * (768 * 64 + 64 + 64 * 768 + 768), 1189632);
}

TEST(WeightedSum, UniformWeights) {
    std::mt19937_64 rng(10);
    const std::vector<Matrix> s{random_matrix(3, 4, rng), random_matrix(3, 4, rng)};
    const Matrix out = weighted_sum(s, LayerWeights::init(2));
    EXPECT_TRUE(out.isApprox(0.5 * s[0] + 0.5 * s[1], 1e-15));
}

TEST(WeightedSum, SoftmaxSaturates) {
    std::mt19937_64 rng(11);
    const std::vector<Matrix> s{random_matrix(3, 4, rng), random_matrix(3, 4, rng), random_matrix(3, 4, rng)};
    LayerWeights lw{(Matrix(1, 3) << 30, 0, 0).finished()};
    EXPECT_LT((weighted_sum(s, lw) - s[0]).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(WeightedSum, CoefficientsFormDistribution) {
    std::mt19937_64 rng(12);
    for (int t = 0; t < 100; ++t) {
        LayerWeights lw{random_matrix(1, 12, rng, 5.0)};
        const RowVector p = lw.coefficients();
        EXPECT_NEAR(p.sum(), 1.0, 1e-6);
        EXPECT_GT(p.minCoeff(), 0.0);
        EXPECT_LT(p.maxCoeff(), 1.0);
    }
}

TEST(WeightedSum, Errors) {
    const std::vector<Matrix> none;
    EXPECT_THROW((void)weighted_sum(none, LayerWeights::init(2)), ConfigError);
    const std::vector<Matrix> two{Matrix::Ones(2, 2), Matrix::Ones(2, 2)};
    EXPECT_THROW((void)weighted_sum(two, LayerWeights::init(3)), ConfigError);
}

TEST(WeightedSum, OneScalarPerLayer) {
    const auto s = AdapterSet::create(presets::wav2vec2_base(), {false, false, true, false}, 0);
    EXPECT_EQ(count_params(s, presets::wav2vec2_base()).ws, 12);
}

TEST(WeightGate, OpenGatePassesThrough) {
    std::mt19937_64 rng(13);
    const Matrix h = random_matrix(4, 8, rng);
    const auto gv = GateVector::init(2, 8, 20.0);
    EXPECT_LT((weight_gate(h, gv, 1) - h).cwiseAbs().maxCoeff(), 1e-6 * h.cwiseAbs().maxCoeff());
}

TEST(WeightGate, ZeroGateHalves) {
    std::mt19937_64 rng(14);
    const Matrix h = random_matrix(4, 8, rng);
    EXPECT_TRUE(bit_identical(weight_gate(h, GateVector::init(2, 8, 0.0), 0), Matrix(0.5 * h)));
}

TEST(WeightGate, BoundsAndMagnitude) {
    std::mt19937_64 rng(15);
    GateVector gv = GateVector::init(1, 32);
    gv.g = random_matrix(1, 32, rng, 4.0);
    const RowVector v = gate_values(gv, 0);
    EXPECT_GT(v.minCoeff(), 0.0);
    EXPECT_LT(v.maxCoeff(), 1.0);
    const Matrix h = random_matrix(6, 32, rng);
    EXPECT_TRUE((weight_gate(h, gv, 0).cwiseAbs().array() <= h.cwiseAbs().array()).all());
}

TEST(WeightGate, UngatedLayerIsConfigError) {
    GateVector gv = GateVector::init(2, 4);
    EXPECT_THROW((void)weight_gate(Matrix::Ones(1, 4), gv, 2), ConfigError);
}

TEST(WeightGate, HubertLargeCount) {
    AdapterConfig c;
    c.wg = true;
    EXPECT_EQ(count_formula(presets::hubert_large(), c).wg, 24576);
}

TEST(CountParams, TableExamples) {
    EXPECT_EQ(count_formula(presets::hubert_large(), {false, false, true, false}).total(), 24);
    EXPECT_EQ(count_formula(presets::wav2vec2_base(), {false, false, false, true}).total(), 9216);
    const auto all = count_formula(presets::hubert_large(), AdapterConfig::all(64, 24));
    EXPECT_EQ(all.ba, 3171840);
    EXPECT_EQ(all.lora, 3538944);
    EXPECT_EQ(all.total(), 6735384);
}

TEST(CountParams, AllocatedMatchesFormula) {
    for (int L : {1, 2, 4}) {
        for (int d : {8, 16, 32}) {
            for (int m : {1, 4}) {
                for (int r : {1, 3}) {
                    ArchShape arch{"t", L, d, 4, 2 * d, 5, 16};
                    for (int mask = 0; mask < 16; ++mask) {
                        AdapterConfig c{bool(mask & 1), bool(mask & 2), bool(mask & 4), bool(mask & 8), m, r, 0.0};
                        const auto got = count_params(AdapterSet::create(arch, c, 1), arch);
                        const auto want = count_formula(arch, c);
                        EXPECT_EQ(got.ba, want.ba);
                        EXPECT_EQ(got.lora, want.lora);
                        EXPECT_EQ(got.ws, want.ws);
                        EXPECT_EQ(got.wg, want.wg);
                        if (c.ba) EXPECT_EQ(got.ba, L * (2LL * d * m + m + d));
                        if (c.lora) EXPECT_EQ(got.lora, 3LL * L * r * (d + d));
                        for (auto k : kAdapterKinds) {
                            if (!c.enabled(k)) EXPECT_EQ(got.of(k), 0);
                        }
                    }
                }
            }
        }
    }
}

TEST(CountParams, StructuralMismatchIsConfigError) {
    const ArchShape arch = presets::toy();
    auto s = AdapterSet::create(arch, AdapterConfig::all(8, 2), 0);
    s.ba.pop_back();
    EXPECT_THROW(count_params(s, arch), ConfigError);
    auto t = AdapterSet::create(arch, AdapterConfig::all(8, 2), 0);
    EXPECT_THROW(count_params(t, presets::wav2vec2_base()), ConfigError);
}
