#include "fixtures.hpp"

#include "shiq/data.hpp"
#include "shiq/errors.hpp"
#include "shiq/train.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace {

using namespace shiq;
using namespace shiq::testing;

struct BanditCase {
    MdpPtr mdp = three_arm_bandit();
    LogitsModel ref = LogitsModel::tabular(mdp);
    OracleSolution oracle = backward_induction(mdp, ref, 0.5);
    OfflineDataset data = generate_paired(mdp, {"mu1", PolicyTable::from_probabilities(mdp, {0.1, 0.2, 0.7}), 1.0},
                                          {"mu2", PolicyTable::from_probabilities(mdp, {0.05, 0.05, 0.9}), 1.0}, 500, 3);

    TrainConfig config(LossId loss) const {
        TrainConfig c;
        c.loss = loss;
        c.beta = 0.5;
        c.batch_size = 64;
        c.epochs = 3;
        c.eval_every = 5;
        c.seed = 11;
        return c;
    }
};

TEST(Adam, FirstStepIsSignedLearningRate) {
    std::vector<double> p = {1.0, -2.0, 0.5, 0.0};
    const std::vector<double> g = {0.3, -4.0, 1e-3, 0.0};
    AdamState s;
    adam_step(p, g, s, 0.01);
    const std::vector<double> start = {1.0, -2.0, 0.5, 0.0};
    for (std::size_t i = 0; i < p.size(); ++i)
        EXPECT_NEAR(p[i], start[i] - 0.01 * g[i] / (std::abs(g[i]) + 1e-8), 1e-15);
    EXPECT_EQ(s.t, 1u);
}

TEST(Adam, SecondStepMatchesRecurrence) {
    std::vector<double> p = {0.0};
    AdamState s;
    adam_step(p, std::vector<double>{2.0}, s, 0.1);
    adam_step(p, std::vector<double>{-1.0}, s, 0.1);
    const double m = 0.9 * 0.1 * 2.0 + 0.1 * -1.0;
    const double v = 0.999 * 0.001 * 4.0 + 0.001 * 1.0;
    const double second = -0.1 * (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.999 * 0.999)) + 1e-8);
    EXPECT_NEAR(p[0], -0.1 * 2.0 / (2.0 + 1e-8) + second, 1e-14);
}

TEST(Adam, ZeroGradientLeavesParameters) {
    std::vector<double> p = {1.0, 2.0};
    AdamState s;
    for (int i = 0; i < 5; ++i) adam_step(p, std::vector<double>{0.0, 0.0}, s, 1.0);
    EXPECT_EQ(p, (std::vector<double>{1.0, 2.0}));
}

TEST(Adam, SizeMismatchThrows) {
    std::vector<double> p = {1.0, 2.0};
    AdamState s;
    EXPECT_THROW(adam_step(p, std::vector<double>{1.0}, s, 1.0), ValidationError);
    EXPECT_THROW(sgd_step(p, std::vector<double>{1.0}, 1.0), ValidationError);
}

TEST(Sgd, StepsAgainstGradient) {
    std::vector<double> p = {1.0, 2.0};
    sgd_step(p, std::vector<double>{0.5, -1.0}, 0.1);
    EXPECT_DOUBLE_EQ(p[0], 0.95);
    EXPECT_DOUBLE_EQ(p[1], 2.1);
}

TEST(Train, StepZeroIsTheReference) {
    const BanditCase b;
    const RunTrace t = train(b.config(LossId::shiq), b.ref, b.data, b.oracle);
    const double soft_optimum = 0.5 * std::log((std::exp(5.0) + std::exp(4.0) + std::exp(2.0)) / 3.0);
    const double reference_return = (2.5 + 2.0 + 1.0) / 3.0;
    ASSERT_FALSE(t.records.empty());
    EXPECT_EQ(t.records[0].step, 0u);
    EXPECT_NEAR(t.records[0].regret, soft_optimum - reference_return, 1e-12);
    EXPECT_NEAR(t.records[0].regret, 0.2918666307, 1e-9);
    EXPECT_DOUBLE_EQ(t.records[0].kl, 0.0);
    EXPECT_NEAR(t.records[0].reward, reference_return, 1e-12);
}

TEST(Train, StepCountAndCheckpoints) {
    const BanditCase b;
    const TrainConfig c = b.config(LossId::shiq);
    const RunTrace t = train(c, b.ref, b.data, b.oracle);
    const std::size_t per_epoch = (b.data.size() + c.batch_size - 1) / c.batch_size;
    EXPECT_EQ(t.steps, per_epoch * 3);
    EXPECT_EQ(t.records.back().step, t.steps);
    for (std::size_t i = 1; i + 1 < t.records.size(); ++i) EXPECT_EQ(t.records[i].step, 5 * i);

    const RunTrace pairs = train(b.config(LossId::copg), b.ref, b.data, b.oracle);
    EXPECT_EQ(pairs.steps, 3 * ((b.data.pairs.size() + 63) / 64));
}

TEST(Train, SameSeedSameTrace) {
    const BanditCase b;
    TrainConfig c = b.config(LossId::shiq_tk);
    const RunTrace first = train(c, b.ref, b.data, b.oracle);
    EXPECT_EQ(first, train(c, b.ref, b.data, b.oracle));
    c.execution = Execution::serial;
    EXPECT_EQ(first, train(c, b.ref, b.data, b.oracle));
    c.seed = 12;
    EXPECT_NE(first.final_parameters, train(c, b.ref, b.data, b.oracle).final_parameters);
}

TEST(Train, ZeroRewardKeepsTheReference) {
    auto mdp = zero_bandit();
    const LogitsModel ref = LogitsModel::tabular(mdp);
    const OracleSolution oracle = backward_induction(mdp, ref, 0.5);
    const std::vector<Behavior> b = {{"u", PolicyTable::uniform(mdp), 1.0}};
    const OfflineDataset ds = generate(mdp, b, 200, 1);
    for (LossId id : {LossId::shiq, LossId::shiq_ms, LossId::shiq_tk}) {
        TrainConfig c;
        c.loss = id;
        c.batch_size = 50;
        c.epochs = 2;
        const RunTrace t = train(c, ref, ds, oracle);
        for (double p : t.final_parameters) EXPECT_EQ(p, 0.0) << to_string(id);
    }
}

TEST(Train, ReducesFullDatasetLoss) {
    const BanditCase b;
    for (LossId id : {LossId::shiq, LossId::shiq_init, LossId::copg, LossId::dro_v}) {
        TrainConfig c = b.config(id);
        c.learning_rate = 1e-2;
        c.epochs = 5;
        OfflineDataset ds = b.data;
        if (id == LossId::dro_v)
            for (const auto& p : ds.pairs) ds.groups.push_back({p.first, p.second});
        const RunTrace t = train(c, b.ref, ds, b.oracle);
        EXPECT_LT(t.records.back().loss, t.records.front().loss) << to_string(id);
    }
}

TEST(Train, ConvergesOnTheBandit) {
    const BanditCase b;
    TrainConfig c = b.config(LossId::shiq_tk);
    c.learning_rate = 5e-2;
    c.batch_size = b.data.size();
    c.epochs = 400;
    c.eval_every = 400;
    const RunTrace t = train(c, b.ref, b.data, b.oracle);
    EXPECT_LT(t.records.back().regret, 1e-2);
}

TEST(Train, RandomInitPerturbsWithinScale) {
    const BanditCase b;
    TrainConfig c = b.config(LossId::shiq);
    c.init = Init::random;
    c.learning_rate = 1e-12;
    c.epochs = 1;
    const RunTrace t = train(c, b.ref, b.data, b.oracle);
    double moved = 0.0;
    for (double p : t.final_parameters) {
        EXPECT_LE(std::abs(p), c.init_scale + 1e-9);
        moved += std::abs(p);
    }
    EXPECT_GT(moved, 0.0);
}

TEST(Validate, RejectsUnusableSetups) {
    const BanditCase b;
    TrainConfig c = b.config(LossId::shiq);
    c.beta = 0.25;
    EXPECT_THROW(train(c, b.ref, b.data, b.oracle), ValidationError);
    c = b.config(LossId::shiq);
    c.batch_size = b.data.size() + 1;
    EXPECT_THROW(train(c, b.ref, b.data, b.oracle), ValidationError);
    c = b.config(LossId::shiq);
    c.epochs = 0;
    EXPECT_THROW(validate(c, b.data, 0.5), ValidationError);
    c.epochs = 1;
    c.learning_rate = 0.0;
    EXPECT_THROW(validate(c, b.data, 0.5), ValidationError);

    EXPECT_THROW(validate(b.config(LossId::dpo), b.data, 0.5), ValidationError);
    EXPECT_NO_THROW(validate(b.config(LossId::dpo), pair_by_preference(b.data, *b.mdp, 1), 0.5));
    EXPECT_THROW(validate(b.config(LossId::dro_v), b.data, 0.5), ValidationError);
    OfflineDataset unpaired = b.data;
    unpaired.pairs.clear();
    EXPECT_THROW(validate(b.config(LossId::copg), unpaired, 0.5), ValidationError);
}

TEST(Validate, OracleMustShareTheMdp) {
    const BanditCase b;
    const BanditCase other;
    EXPECT_THROW(train(b.config(LossId::shiq), b.ref, b.data, other.oracle), ValidationError);
}

TEST(Optimizer, ParsesNames) {
    EXPECT_EQ(parse_optimizer("adam"), Optimizer::adam);
    EXPECT_EQ(parse_optimizer("sgd"), Optimizer::sgd);
    EXPECT_THROW(parse_optimizer("lion"), ValidationError);
}

std::string first_line(const std::string& path) {
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    return line;
}

TEST(Csv, HeadersAndRows) {
    const BanditCase b;
    const RunTrace t = train(b.config(LossId::shiq), b.ref, b.data, b.oracle);
    const auto dir = std::filesystem::temp_directory_path();
    const std::string metrics = (dir / "shiq_train_metrics.csv").string(), curve = (dir / "shiq_train_curve.csv").string();
    write_metrics_csv(t, metrics);
    write_curve_csv(t, curve);
    EXPECT_EQ(first_line(metrics), "step,loss,regret,kl,grad_norm");
    EXPECT_EQ(first_line(curve), "step,reward,kl,success");
    std::ifstream in(metrics);
    std::size_t lines = 0;
    for (std::string l; std::getline(in, l);) ++lines;
    EXPECT_EQ(lines, t.records.size() + 1);
    std::remove(metrics.c_str());
    std::remove(curve.c_str());
}

} // namespace
