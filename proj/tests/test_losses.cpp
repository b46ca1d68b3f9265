#include "fixtures.hpp"

#include "shiq/errors.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

using namespace shiq;
using namespace shiq::testing;

namespace {

double norm(const std::vector<double>& v) {
    return std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
}

LogitsModel fixed_point(LossId id, const OracleSolution& sol) {
    switch (id) {
    case LossId::try1: return sol.q_model();
    case LossId::try2:
    case LossId::shiq_init: return sol.g_model();
    default: return sol.l_model();
    }
}

LossBatch single_arm_batch(const MdpPtr& bandit, double beta) {
    std::vector<Trajectory> trajs;
    for (ActionId a = 0; a < bandit->vocabulary_size(); ++a) trajs.push_back(bandit->rollout(0, std::vector<ActionId>{a}));
    return LossBatch::all(store_of(bandit, trajs), beta);
}

std::vector<MdpPtr> environments() {
    return {three_arm_bandit(), small_grid(true), dense_chain(), multi_turn_chain()};
}

} // namespace

TEST(LossId, RoundTrip) {
    for (LossId id : kAllLosses) EXPECT_EQ(parse_loss_id(to_string(id)), id);
    EXPECT_THROW(parse_loss_id("ppo"), ValidationError);
    EXPECT_EQ(parse_normalization("sequence"), Normalization::sequence_count);
    EXPECT_THROW(parse_normalization("per-token"), ValidationError);
}

TEST(FixedPoint, AnnihilatesEveryBellmanLoss) {
    for (const MdpPtr& mdp : environments()) {
        const double beta = 0.3;
        const auto ref = random_tabular(mdp, 5);
        const auto sol = backward_induction(mdp, ref, beta);
        const LossBatch batch = full_batch(mdp, beta);
        for (LossId id : {LossId::try1, LossId::try2, LossId::shiq_ms, LossId::shiq, LossId::shiq_init, LossId::shiq_tk,
                          LossId::copg, LossId::dro_v}) {
            const auto out = evaluate_loss(id, fixed_point(id, sol), ref, batch);
            EXPECT_LE(out.value, 1e-16) << to_string(id) << " on " << mdp->name();
            EXPECT_LE(norm(out.gradient), 1e-8) << to_string(id) << " on " << mdp->name();
        }
    }
}

TEST(FixedPoint, CopgMultiTurnUndiscounted) {
    auto mdp = multi_turn_chain();
    const auto ref = random_tabular(mdp, 2);
    const auto sol = backward_induction(mdp, ref, 0.5);
    const auto out = evaluate_loss(LossId::copg_mt, sol.l_model(), ref, full_batch(mdp, 0.5));
    EXPECT_LE(out.value, 1e-16);
}

TEST(Try1, BanditZeroQ) {
    auto mdp = three_arm_bandit();
    const auto q = LogitsModel::tabular(mdp);
    const auto out = loss_try1(q, q, single_arm_batch(mdp, 0.5));
    EXPECT_NEAR(out.value, (2.5 * 2.5 + 4.0 + 1.0) / 3.0, 1e-15);
    EXPECT_NEAR(out.gradient[0], -2.0 * 2.5 / 3.0, 1e-15);
}

TEST(Try1, ZeroRewardZeroQ) {
    auto mdp = terminal_chain(3, 0.0);
    const auto q = LogitsModel::tabular(mdp);
    const auto out = loss_try1(q, q, full_batch(mdp, 0.5));
    EXPECT_EQ(out.value, 0.0);
}

TEST(Try2, BanditReferenceZeroReward) {
    auto mdp = zero_bandit();
    const auto ref = LogitsModel::tabular(mdp);
    const double beta = 0.5;
    EXPECT_NEAR(loss_try2(ref, ref, single_arm_batch(mdp, beta)).value, beta * beta * std::log(3.0) * std::log(3.0), 1e-15);
    EXPECT_NEAR(loss_shiq_init(ref, ref, single_arm_batch(mdp, beta)).value, beta * beta * std::log(3.0) * std::log(3.0),
                1e-15);
}

TEST(Try2, ReferenceZeroRewardNonTelescoping) {
    ChainConfig c;
    c.length = 3;
    c.vocabulary = 3;
    c.eos = 2;
    c.gamma = 0.9;
    auto mdp = make_token_chain(c);
    const auto ref = random_tabular(mdp, 31);
    const double beta = 0.4;
    const LossBatch batch = full_batch(mdp, beta);
    double acc = 0.0;
    std::size_t terms = 0;
    for (std::size_t i = 0; i < batch.store->size(); ++i) {
        const auto& t = batch.store->resolved(i);
        for (std::size_t k = 0; k < t.length(); ++k) {
            const double next = t.discounts[k] != 0.0 ? t.discounts[k] * log_partition(ref, t.states[k + 1]) : 0.0;
            const double d = next - log_partition(ref, t.states[k]);
            acc += d * d;
            ++terms;
        }
    }
    const double expected = beta * beta * acc / static_cast<double>(terms);
    const auto out = loss_try2(ref, ref, batch);
    EXPECT_NEAR(out.value, expected, 1e-14);
    EXPECT_GT(out.value, 0.0);
}

TEST(ShiqMs, ReferenceZeroReward) {
    auto mdp = terminal_chain(4, 0.0);
    const auto ref = random_tabular(mdp, 1);
    for (LossId id : {LossId::shiq_ms, LossId::shiq, LossId::shiq_tk}) {
        const auto out = evaluate_loss(id, ref, ref, full_batch(mdp, 0.5));
        EXPECT_EQ(out.value, 0.0) << to_string(id);
        EXPECT_LE(norm(out.gradient), 1e-12) << to_string(id);
    }
}

TEST(ShiqInit, PositiveWhenReferenceValueNonZero) {
    auto mdp = terminal_chain(3, 0.0);
    const auto ref = LogitsModel::tabular(mdp);
    const auto out = loss_shiq_init(ref, ref, full_batch(mdp, 0.5));
    EXPECT_GT(out.value, 0.0);
    EXPECT_GT(norm(out.gradient), 0.0);
}

TEST(InitContrast, GradientNorms) {
    auto mdp = zero_bandit();
    const auto ref = LogitsModel::tabular(mdp);
    const LossBatch batch = single_arm_batch(mdp, 0.5);
    EXPECT_LE(norm(loss_shiq(ref, ref, batch).gradient), 1e-12);
    EXPECT_LE(norm(loss_shiq_ms(ref, ref, batch).gradient), 1e-12);
    EXPECT_GE(norm(loss_try2(ref, ref, batch).gradient), 1e-3);
    EXPECT_GE(norm(loss_shiq_init(ref, ref, batch).gradient), 1e-3);
}

TEST(Propagation, FirstGradientSupport) {
    auto mdp = terminal_chain(6);
    const auto ref = LogitsModel::tabular(mdp);
    const LossBatch batch = full_batch(mdp, 1.0);
    const auto ms = loss_shiq_ms(ref, ref, batch);
    const auto sh = loss_shiq(ref, ref, batch);
    std::vector<bool> ms_touch(7, false), sh_touch(7, false);
    for (std::size_t si = 0; si < mdp->state_count(); ++si) {
        const auto s = static_cast<StateId>(si);
        const int depth = mdp->time_of(s);
        for (std::size_t k = 0; k < mdp->action_count(s); ++k) {
            const std::size_t p = mdp->pair_offset(s) + k;
            if (ms.gradient[p] != 0.0) ms_touch[static_cast<std::size_t>(depth)] = true;
            if (sh.gradient[p] != 0.0) sh_touch[static_cast<std::size_t>(depth)] = true;
        }
    }
    for (int d = 1; d <= 6; ++d) {
        EXPECT_EQ(ms_touch[static_cast<std::size_t>(d)], d == 6) << d;
        EXPECT_TRUE(sh_touch[static_cast<std::size_t>(d)]) << d;
    }
}

TEST(Reference, ScanMatchesNaiveOnRandomTrajectories) {
    for (const MdpPtr& mdp : {dense_chain(4, 0.95), small_grid(true), multi_turn_chain()}) {
        const auto ref = random_tabular(mdp, 9);
        const auto model = random_tabular(mdp, 10, 2.0);
        const auto trajs = sample_many(PolicyTable::from_model(model), 100, 44);
        LossBatch batch = LossBatch::all(store_of(mdp, trajs), 0.35);
        for (std::size_t i = 0; i + 1 < trajs.size(); i += 2) {
            if (trajs[i].prompt != trajs[i + 1].prompt) continue;
            batch.pairs.push_back({i, i + 1, i % 4 ? Preference::first : Preference::second});
            batch.groups.push_back({i, i + 1});
        }
        for (LossId id : kAllLosses) {
            const double fast = evaluate_loss(id, model, ref, batch).value;
            const double slow = reference::loss_value(id, model, ref, batch);
            EXPECT_NEAR(fast, slow, 1e-12 * std::max(1.0, std::abs(slow))) << to_string(id) << " on " << mdp->name();
        }
    }
}

TEST(Normalization, DuplicationInvariance) {
    auto mdp = dense_chain();
    const auto ref = random_tabular(mdp, 1);
    const auto model = random_tabular(mdp, 2);
    const auto trajs = sample_many(PolicyTable::from_model(model), 20, 5);
    auto doubled = trajs;
    doubled.insert(doubled.end(), trajs.begin(), trajs.end());
    const LossBatch once = LossBatch::all(store_of(mdp, trajs), 0.5);
    const LossBatch twice = LossBatch::all(store_of(mdp, doubled), 0.5);
    for (LossId id : {LossId::try1, LossId::try2, LossId::shiq_ms, LossId::shiq, LossId::shiq_init, LossId::shiq_tk})
        EXPECT_NEAR(evaluate_loss(id, model, ref, once).value, evaluate_loss(id, model, ref, twice).value, 1e-14)
            << to_string(id);
}

TEST(Normalization, SequenceCount) {
    auto mdp = terminal_chain(3);
    const auto ref = LogitsModel::tabular(mdp);
    LossBatch batch = full_batch(mdp, 0.5);
    const double token = loss_shiq(ref, ref, batch).value;
    batch.normalization = Normalization::sequence_count;
    EXPECT_NEAR(loss_shiq(ref, ref, batch).value, 3.0 * token, 1e-15);
}

TEST(Dpo, ReferenceIsLog2) {
    auto mdp = three_arm_bandit();
    const auto ref = LogitsModel::tabular(mdp);
    LossBatch batch = single_arm_batch(mdp, 0.5);
    batch.pairs = {{0, 1, Preference::first}, {2, 0, Preference::second}};
    EXPECT_NEAR(loss_dpo(ref, ref, batch).value, std::log(2.0), 1e-15);
    EXPECT_NEAR(loss_dpo_mt(ref, ref, batch).value, std::log(2.0), 1e-15);
}

TEST(Dpo, MarginDrivesLossToZero) {
    auto mdp = make_bandit({1.0, 0.0});
    const auto ref = LogitsModel::tabular(mdp);
    LossBatch batch = single_arm_batch(mdp, 1.0);
    batch.pairs = {{0, 1, Preference::first}};
    double prev = std::numeric_limits<double>::infinity();
    for (double margin : {0.0, 1.0, 4.0, 16.0, 64.0}) {
        LogitsModel m = LogitsModel::tabular(mdp);
        m.parameters()[0] = margin;
        const double v = loss_dpo(m, ref, batch).value;
        EXPECT_LT(v, prev);
        prev = v;
    }
    EXPECT_LT(prev, 1e-20);
}

TEST(Dpo, RequiresPreference) {
    auto mdp = three_arm_bandit();
    const auto ref = LogitsModel::tabular(mdp);
    LossBatch batch = single_arm_batch(mdp, 0.5);
    batch.pairs = {{0, 1, Preference::unmarked}};
    EXPECT_THROW(loss_dpo(ref, ref, batch), ValidationError);
    EXPECT_NO_THROW(loss_copg(ref, ref, batch));
}

TEST(Copg, EqualReturnsAtReference) {
    auto mdp = make_bandit({1.0, 1.0});
    const auto ref = LogitsModel::tabular(mdp);
    LossBatch batch = single_arm_batch(mdp, 0.5);
    batch.pairs = {{0, 1, Preference::unmarked}};
    EXPECT_EQ(loss_copg(ref, ref, batch).value, 0.0);
}

TEST(Copg, MixedPromptsRejected) {
    auto mdp = dense_chain();
    const auto ref = LogitsModel::tabular(mdp);
    std::vector<Trajectory> t{mdp->rollout(0, std::vector<ActionId>{2}), mdp->rollout(1, std::vector<ActionId>{2})};
    LossBatch batch = LossBatch::all(store_of(mdp, t), 0.5);
    batch.pairs = {{0, 1, Preference::first}};
    EXPECT_THROW(loss_copg(ref, ref, batch), ValidationError);
    batch.groups = {{0, 1}};
    EXPECT_THROW(loss_dro_v(ref, ref, batch), ValidationError);
}

TEST(DroV, TwoSampleVariance) {
    auto mdp = three_arm_bandit();
    const auto ref = LogitsModel::tabular(mdp);
    const auto m = random_tabular(mdp, 3);
    LossBatch batch = single_arm_batch(mdp, 0.5);
    batch.groups = {{0, 2}};
    auto d = [&](ActionId a, double r) { return r - 0.5 * (log_prob(m, 0, a) - log_prob(ref, 0, a)); };
    const double d1 = d(0, 2.5), d2 = d(2, 1.0);
    EXPECT_NEAR(loss_dro_v(m, ref, batch).value, (d1 - d2) * (d1 - d2) / 4.0, 1e-14);
}

TEST(DroV, EqualAdvantagesGiveZero) {
    auto mdp = make_bandit({1.0, 1.0});
    const auto ref = LogitsModel::tabular(mdp);
    LossBatch batch = single_arm_batch(mdp, 0.5);
    batch.groups = {{0, 1}};
    EXPECT_EQ(loss_dro_v(ref, ref, batch).value, 0.0);
    batch.groups = {{0}};
    EXPECT_THROW(loss_dro_v(ref, ref, batch), ValidationError);
}

TEST(Batch, EmptyIsZero) {
    auto mdp = three_arm_bandit();
    const auto ref = LogitsModel::tabular(mdp);
    LossBatch batch;
    batch.store = store_of(mdp, {});
    batch.beta = 0.5;
    for (LossId id : kAllLosses) {
        const auto out = evaluate_loss(id, ref, ref, batch);
        EXPECT_EQ(out.value, 0.0);
        EXPECT_EQ(norm(out.gradient), 0.0);
    }
}

TEST(Batch, UnterminatedRejected) {
    auto mdp = dense_chain();
    const auto ref = LogitsModel::tabular(mdp);
    const Trajectory partial = mdp->rollout(0, std::vector<ActionId>{0});
    ASSERT_FALSE(partial.terminated);
    EXPECT_THROW(loss_shiq(ref, ref, LossBatch::all(store_of(mdp, {partial}), 0.5)), ValidationError);
}

TEST(Batch, KeepsResiduals) {
    auto mdp = terminal_chain(3);
    const auto ref = LogitsModel::tabular(mdp);
    const LossBatch batch = full_batch(mdp, 1.0);
    LossOptions opt;
    opt.keep_residuals = true;
    const auto out = evaluate_loss(LossId::shiq, ref, ref, batch, opt);
    EXPECT_EQ(out.residuals.size(), 3 * batch.trajectories.size());
    // residual at start t equals the terminal reward for trajectories ending in token 0
    EXPECT_DOUBLE_EQ(out.residuals[0], 1.0);
}

TEST(Determinism, SerialEqualsParallelBitwise) {
    auto grid = make_gridworld(GridConfig::fine_grained());
    const auto ref = LogitsModel::linear(grid);
    const auto model = random_linear(grid, 3, 0.3);
    const auto trajs = sample_many(PolicyTable::from_model(model), 200, 1);
    LossBatch batch = LossBatch::all(store_of(grid, trajs), 0.1);
    for (std::size_t i = 0; i + 1 < trajs.size(); i += 2) {
        batch.pairs.push_back({i, i + 1, Preference::first});
        batch.groups.push_back({i, i + 1});
    }
    for (LossId id : kAllLosses) {
        LossOptions serial, parallel;
        serial.execution = Execution::serial;
        parallel.execution = Execution::parallel;
        const auto a = evaluate_loss(id, model, ref, batch, serial);
        const auto b = evaluate_loss(id, model, ref, batch, parallel);
        EXPECT_EQ(a.value, b.value) << to_string(id);
        EXPECT_EQ(a.gradient, b.gradient) << to_string(id);
    }
}

TEST(GradientCheck, EveryLossEveryEnvironment) {
    for (const MdpPtr& mdp : {three_arm_bandit(), small_grid(true), dense_chain()}) {
        const auto ref = random_tabular(mdp, 77);
        const auto model = random_tabular(mdp, 78, 1.5);
        const auto trajs = sample_many(PolicyTable::from_model(ref), 12, 4);
        LossBatch batch = LossBatch::all(store_of(mdp, trajs), 0.6);
        for (std::size_t i = 0; i + 1 < trajs.size(); ++i) {
            if (trajs[i].prompt != trajs[i + 1].prompt) continue;
            batch.pairs.push_back({i, i + 1, i % 2 ? Preference::first : Preference::second});
            batch.groups.push_back({i, i + 1});
        }
        for (LossId id : kAllLosses) {
            const auto rep = gradient_check(id, model, ref, batch);
            EXPECT_TRUE(rep.passed) << to_string(id) << " on " << mdp->name() << ": " << rep.max_relative_error;
            EXPECT_EQ(rep.checked, model.parameter_count());
        }
    }
}

TEST(GradientCheck, LinearGridSubset) {
    auto grid = make_gridworld(GridConfig::fine_grained());
    const auto ref = LogitsModel::linear(grid);
    const auto model = random_linear(grid, 6, 0.3);
    const auto trajs = sample_many(PolicyTable::from_model(model), 6, 8);
    LossBatch batch = LossBatch::all(store_of(grid, trajs), 0.1);
    batch.pairs = {{0, 1, Preference::first}, {2, 3, Preference::second}};
    batch.groups = {{0, 1, 2}, {3, 4, 5}};
    for (LossId id : kAllLosses) {
        const auto rep = gradient_check(id, model, ref, batch, 1e-5, 1e-4, 3);
        EXPECT_TRUE(rep.passed) << to_string(id) << ": " << rep.max_relative_error;
        EXPECT_EQ(rep.checked, std::min(kGradientSubset, model.parameter_count()));
    }
}

TEST(GradientCheck, ZeroGradientPoint) {
    auto mdp = terminal_chain(3, 0.0);
    const auto ref = LogitsModel::tabular(mdp);
    const auto rep = gradient_check(LossId::shiq, ref, ref, full_batch(mdp, 0.5));
    EXPECT_TRUE(rep.passed);
    EXPECT_LE(rep.max_absolute_error, 1e-10);
}

TEST(GradientCheck, CorruptedGradientFails) {
    auto mdp = dense_chain();
    const auto ref = LogitsModel::tabular(mdp);
    LogitsModel model = random_tabular(mdp, 2);
    const LossBatch batch = full_batch(mdp, 0.5);
    auto grad = evaluate_loss(LossId::shiq, model, ref, batch).gradient;
    grad[grad.size() / 2] += 0.01;
    auto value = [&](std::span<const double> x) {
        model.set_parameters(x);
        return evaluate_loss(LossId::shiq, model, ref, batch).value;
    };
    const std::vector<double> x(model.parameters().begin(), model.parameters().end());
    const auto rep = compare_gradient(value, x, grad, 1e-5, 1e-4, x.size());
    EXPECT_FALSE(rep.passed);
}

TEST(GradientCheck, StepRange) {
    auto mdp = three_arm_bandit();
    const auto ref = LogitsModel::tabular(mdp);
    EXPECT_THROW(gradient_check(LossId::shiq, ref, ref, single_arm_batch(mdp, 0.5), 1e-2), ValidationError);
}
