#include "peft/data.hpp"
#include "peft/metrics.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

using namespace peft;

namespace {

std::vector<double> random_vector(std::size_t n, std::mt19937_64& rng) {
    std::normal_distribution<double> d(0.0, 1.0);
    std::vector<double> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

double population_variance(const std::vector<double>& x) {
    const double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
    double s = 0.0;
    for (double v : x) s += (v - mean) * (v - mean);
    return s / static_cast<double>(x.size());
}

} // namespace

TEST(Accuracy, Examples) {
    const std::vector<Emotion> a{Emotion::happy, Emotion::sad, Emotion::angry, Emotion::neutral};
    const std::vector<Emotion> b{Emotion::happy, Emotion::sad, Emotion::neutral, Emotion::neutral};
    const std::vector<Emotion> c{Emotion::sad, Emotion::happy, Emotion::neutral, Emotion::angry};
    EXPECT_EQ(accuracy(a, a), 1.0);
    EXPECT_EQ(accuracy(a, c), 0.0);
    EXPECT_EQ(accuracy(a, b), 0.75);
}

TEST(Accuracy, Errors) {
    const std::vector<int> empty;
    EXPECT_THROW(accuracy(empty, empty), InputError);
    EXPECT_THROW(accuracy(std::vector<int>{1}, std::vector<int>{1, 2}), InputError);
}

TEST(CCC, UnitCases) {
    EXPECT_EQ(ccc({1, 2, 3}, {1, 2, 3}), 1.0);
    EXPECT_EQ(ccc({1, 2, 3}, {3, 2, 1}), -1.0);
    EXPECT_DOUBLE_EQ(ccc({2, 3, 4}, {1, 2, 3}), 4.0 / 7.0);
}

TEST(CCC, ConstantVectors) {
    EXPECT_THROW(ccc({2, 2, 2}, {5, 5, 5}), UndefinedCorrelationError);
    const std::vector<double> flat{1, 1, 1}, varied{1, 2, 3};
    const auto r = ccc_checked(flat, varied);
    EXPECT_EQ(r.value, 0.0);
    EXPECT_TRUE(r.degenerate);
    EXPECT_FALSE(ccc_checked(varied, varied).degenerate);
}

TEST(CCC, LengthErrors) {
    EXPECT_THROW(ccc({1}, {1}), InputError);
    EXPECT_THROW(ccc({1, 2}, {1, 2, 3}), InputError);
}

TEST(CCC, MeanShiftLaw) {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> shift(-3.0, 3.0);
    std::uniform_int_distribution<int> len(2, 200);
    for (int t = 0; t < 500; ++t) {
        const auto x = random_vector(static_cast<std::size_t>(len(rng)), rng);
        const double c = shift(rng);
        std::vector<double> y = x;
        for (auto& v : y) v += c;
        const double s2 = population_variance(x);
        EXPECT_NEAR(ccc(y, x), 2 * s2 / (2 * s2 + c * c), 1e-9);
    }
}

TEST(CCC, BoundedSymmetricAndSelfConcordant) {
    std::mt19937_64 rng(2);
    for (int t = 0; t < 200; ++t) {
        const auto a = random_vector(20, rng);
        const auto b = random_vector(20, rng);
        const double v = ccc(a, b);
        EXPECT_LE(std::abs(v), 1.0);
        EXPECT_NEAR(v, ccc(b, a), 1e-15);
        EXPECT_NEAR(ccc(a, a), 1.0, 1e-15);
    }
}

TEST(CCC, JointAffineInvariance) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> alpha(0.1, 5.0), beta(-4.0, 4.0);
    for (int t = 0; t < 200; ++t) {
        const auto x = random_vector(30, rng);
        const auto y = random_vector(30, rng);
        const double a = alpha(rng), b = beta(rng);
        std::vector<double> xs = x, ys = y;
        for (auto& v : xs) v = a * v + b;
        for (auto& v : ys) v = a * v + b;
        EXPECT_NEAR(ccc(xs, ys), ccc(x, y), 1e-9);
    }
}

TEST(Metrics, JointPermutationInvariance) {
    std::mt19937_64 rng(4);
    const auto x = random_vector(25, rng);
    const auto y = random_vector(25, rng);
    std::vector<int> lx(25), ly(25);
    for (int i = 0; i < 25; ++i) {
        lx[static_cast<std::size_t>(i)] = i % 4;
        ly[static_cast<std::size_t>(i)] = (i * 7) % 4;
    }
    std::vector<std::size_t> perm(25);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> px, py;
    std::vector<int> plx, ply;
    for (auto i : perm) {
        px.push_back(x[i]);
        py.push_back(y[i]);
        plx.push_back(lx[i]);
        ply.push_back(ly[i]);
    }
    EXPECT_NEAR(ccc(px, py), ccc(x, y), 1e-12);
    EXPECT_NEAR(pearson(px, py), pearson(x, y), 1e-12);
    EXPECT_EQ(accuracy(plx, ply), accuracy(lx, ly));
}

TEST(Pearson, Examples) {
    EXPECT_DOUBLE_EQ(pearson({1, 2, 3}, {1, 2, 3}), 1.0);
    EXPECT_DOUBLE_EQ(pearson({-1, 0, 1}, {1, 0, -1}), -1.0);
    EXPECT_DOUBLE_EQ(pearson({1, 2, 3}, {2, 4, 6}), 1.0);
    EXPECT_THROW(pearson({1, 1}, {2, 2}), UndefinedCorrelationError);
    const std::vector<double> flat{1, 1, 1}, varied{1, 2, 3};
    EXPECT_TRUE(pearson_checked(flat, varied).degenerate);
}

TEST(CvMean, Examples) {
    EvalResult a;
    a.acc = 0.6;
    a.ccc_v = 0.2;
    a.n = 10;
    EvalResult b;
    b.acc = 0.8;
    b.ccc_v = 0.4;
    b.n = 30;
    const auto one = cv_mean(std::vector<EvalResult>{a});
    EXPECT_EQ(one.acc, a.acc);
    EXPECT_EQ(one.n, a.n);
    const auto two = cv_mean(std::vector<EvalResult>{a, b});
    EXPECT_DOUBLE_EQ(two.acc, 0.7);
    EXPECT_DOUBLE_EQ(two.ccc_v, 0.3);
    EXPECT_EQ(two.n, 40);
    const auto five = cv_mean(std::vector<EvalResult>(5, b));
    EXPECT_DOUBLE_EQ(five.acc, b.acc);
    EXPECT_DOUBLE_EQ(five.ccc_v, b.ccc_v);
    EXPECT_THROW(cv_mean(std::vector<EvalResult>{}), InputError);
}
