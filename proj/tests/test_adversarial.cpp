#include <gtest/gtest.h>

#include <random>

#include "lnl/lnl.hpp"
#include "oracles.hpp"

using namespace lnl;

namespace {

/// Logits [0, w.x + b]: the loss gradient sign is +-sign(w) for every input.
struct LinearBinary {
    Tensor w;  // [D, 1]
    double b = 0.1;
    Tensor logits(const Tensor& x) const {
        const std::size_t batch = x.shape()[0];
        Tensor s = add_scalar(matmul(reshape(x, {batch, w.shape()[0]}), w), b);
        return concat({Tensor::zeros({batch, 1}), s}, 1);
    }
};

/// Logits independent of the input, but still on the tape.
struct ConstantModel {
    std::size_t classes = 4;
    Tensor logits(const Tensor& x) const {
        const std::size_t batch = x.shape()[0];
        Tensor flat = reshape(x, {batch, x.numel() / batch});
        return matmul(flat, Tensor::zeros({flat.shape()[1], classes}));
    }
};

LinearBinary make_linear(std::size_t dim, std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    LinearBinary m;
    m.w = oracle::random_tensor({dim, 1}, gen);
    return m;
}

double loss_of(const LinearBinary& m, const Tensor& x, const std::vector<int>& y) {
    return cross_entropy(m.logits(x), y).item();
}

void expect_in_ball(const Tensor& adv, const Tensor& x, double eps) {
    for (std::size_t i = 0; i < x.numel(); ++i) {
        ASSERT_LE(std::abs(adv[i] - x[i]), eps) << "index " << i;
        ASSERT_GE(adv[i], 0.0);
        ASSERT_LE(adv[i], 1.0);
    }
}

Tensor images(std::size_t batch, std::size_t side, std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    return oracle::random_tensor({batch, 3, side, side}, gen, 0.0, 1.0);
}

}  // namespace

TEST(Fgsm, ZeroGradientLeavesInput) {
    ConstantModel model;
    Tensor x = images(3, 4, 1);
    std::vector<int> y{0, 1, 2};
    EXPECT_EQ(oracle::values(fgsm(model, x, y, AttackSpec::fgsm(0.1))), oracle::values(x));
}

TEST(Fgsm, StaysInBallAndBox) {
    auto model = make_linear(48, 2);
    for (double eps : {1.0 / 255, 4.0 / 255, 0.3}) {
        Tensor x = images(5, 4, 3);
        std::vector<int> y{0, 1, 0, 1, 1};
        expect_in_ball(fgsm(model, x, y, AttackSpec::fgsm(eps)), x, eps);
    }
}

TEST(Fgsm, MatchesClosedFormOnLinearModel) {
    auto model = make_linear(12, 4);
    Tensor x = images(2, 2, 5);
    std::vector<int> y{0, 1};
    const double eps = 0.05;
    Tensor adv = fgsm(model, x, y, AttackSpec::fgsm(eps));
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t i = 0; i < 12; ++i) {
            double dir = (model.w[i] > 0 ? 1.0 : -1.0) * (y[b] == 0 ? 1.0 : -1.0);
            double expect = std::clamp(x[b * 12 + i] + eps * dir, 0.0, 1.0);
            EXPECT_NEAR(adv[b * 12 + i], expect, 1e-15);
        }
}

TEST(Fgsm, RejectsNonPositiveEpsilon) {
    auto model = make_linear(12, 4);
    std::vector<int> y{0};
    EXPECT_THROW(fgsm(model, images(1, 2, 1), y, AttackSpec::fgsm(0.0)), std::invalid_argument);
    EXPECT_THROW(fgsm(model, images(1, 2, 1), y, AttackSpec::fgsm(-0.1)), std::invalid_argument);
}

TEST(Pgd, SingleStepEqualsFgsm) {
    LnlModel model(presets::lnl_micro(4), 2);
    Tensor x = images(4, 32, 6);
    std::vector<int> y{0, 1, 2, 3};
    const double eps = 4.0 / 255;
    for (double alpha : {eps, 2 * eps}) {
        Tensor a = pgd(model, x, y, AttackSpec::pgd(eps, alpha, 1));
        Tensor f = fgsm(model, x, y, AttackSpec::fgsm(eps));
        EXPECT_EQ(oracle::values(a), oracle::values(f));
    }
}

TEST(Pgd, EveryIterateStaysInBall) {
    auto model = make_linear(48, 7);
    Tensor x = images(3, 4, 8);
    std::vector<int> y{1, 0, 1};
    const double eps = 2.0 / 255;
    auto spec = AttackSpec::pgd(eps, 1.0 / 255, 6);
    spec.random_start = true;
    spec.seed = 3;
    std::size_t steps = 0;
    Tensor adv = pgd(model, x, y, spec, [&](std::size_t, const Tensor& it) {
        expect_in_ball(it, x, eps);
        ++steps;
    });
    EXPECT_EQ(steps, 6u);
    expect_in_ball(adv, x, eps);
}

TEST(Pgd, LinearOracleOrdering) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto model = make_linear(48, seed);
        Tensor x = images(4, 4, seed + 100);
        std::vector<int> y{0, 1, 1, 0};
        const double eps = 3.0 / 255;
        Tensor f = fgsm(model, x, y, AttackSpec::fgsm(eps));
        Tensor p = pgd(model, x, y, AttackSpec::pgd(eps, eps / 2, 5));
        EXPECT_GE(loss_of(model, p, y), loss_of(model, f, y));
        EXPECT_GE(loss_of(model, f, y), loss_of(model, x, y));
    }
}

TEST(Pgd, InvalidSpec) {
    auto model = make_linear(12, 1);
    std::vector<int> y{0};
    EXPECT_THROW(pgd(model, images(1, 2, 1), y, AttackSpec::pgd(0.1, 0.0, 5)), std::invalid_argument);
    EXPECT_THROW(pgd(model, images(1, 2, 1), y, AttackSpec::pgd(0.1, 0.01, 0)), std::invalid_argument);
    EXPECT_THROW(pgd(model, images(1, 2, 1), y, AttackSpec::fgsm(0.1)), std::invalid_argument);
}

TEST(Attack, LeavesModelUntouchedAndIsDeterministic) {
    LnlModel model(presets::lnl_micro(4), 3);
    std::vector<std::vector<double>> before;
    for (const auto& p : model.parameters()) before.push_back(oracle::values(p.tensor));
    Tensor x = images(2, 32, 9);
    std::vector<int> y{1, 3};
    auto spec = AttackSpec::pgd(4.0 / 255, 1.0 / 255, 3);
    Tensor a = pgd(model, x, y, spec);
    Tensor b = pgd(model, x, y, spec);
    EXPECT_EQ(oracle::values(a), oracle::values(b));
    auto params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
        EXPECT_EQ(oracle::values(params[i].tensor), before[i]) << params[i].name;
        EXPECT_FALSE(params[i].tensor.has_grad()) << params[i].name;
    }
}

TEST(RobustAccuracy, NullAttackEqualsClean) {
    LnlModel model(presets::lnl_micro(4), 4);
    auto data = synth_shapes(20, 4, 32, 5);
    auto spec = AttackSpec::fgsm(1.0);
    spec.epsilon = 0.0;
    auto r = robust_accuracy(model, batch_source(data, 8), spec);
    EXPECT_EQ(r.robust_accuracy, r.clean_accuracy);
    EXPECT_EQ(r.samples, 20u);
}

TEST(RobustAccuracy, ConstantModelIsAtChance) {
    ConstantModel model;
    auto data = synth_shapes(40, 4, 8, 6);
    auto r = robust_accuracy(model, batch_source(data, 16), AttackSpec::fgsm(0.1));
    EXPECT_EQ(r.clean_accuracy, 0.25);
    EXPECT_EQ(r.robust_accuracy, 0.25);
}

TEST(RobustAccuracy, NeverExceedsClean) {
    LnlModel model(presets::lnl_micro(4), 5);
    auto data = synth_shapes(24, 4, 32, 7);
    for (auto spec : {AttackSpec::fgsm(4.0 / 255), AttackSpec::pgd(4.0 / 255, 2.0 / 255, 2)}) {
        auto r = robust_accuracy(model, batch_source(data, 12), spec);
        EXPECT_LE(r.robust_accuracy, r.clean_accuracy);
    }
}

TEST(RobustAccuracy, EmptyDatasetIsAnError) {
    ConstantModel model;
    auto data = synth_shapes(4, 4, 8, 6);
    EXPECT_THROW(robust_accuracy(model, batch_source(data, 4, 0), AttackSpec::fgsm(0.1)), std::invalid_argument);
}

TEST(AttackSpec, ParseFamily) {
    EXPECT_EQ(parse_attack_family("pgd"), AttackFamily::pgd);
    EXPECT_EQ(to_string(AttackFamily::fgsm), "fgsm");
    EXPECT_THROW(parse_attack_family("cw"), std::invalid_argument);
}
