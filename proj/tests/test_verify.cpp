#include "shiq/errors.hpp"
#include "shiq/verify.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

namespace {

using namespace shiq;

bool all_pass(const std::vector<Check>& cs) {
    return std::all_of(cs.begin(), cs.end(), [](const Check& c) { return c.passed(); });
}

TEST(Check, BoundDirection) {
    EXPECT_TRUE((Check{"a", 1e-10, 1e-9, false}).passed());
    EXPECT_FALSE((Check{"a", 1e-8, 1e-9, false}).passed());
    EXPECT_TRUE((Check{"a", 1.0, 1e-3, true}).passed());
    EXPECT_FALSE((Check{"a", 1e-4, 1e-3, true}).passed());
    EXPECT_FALSE((Check{"a", std::nan(""), 1.0, false}).passed());
}

TEST(ReportLine, Format) {
    EXPECT_EQ(report_line({"thm1.residual/bandit", 0.0, 1e-10, false}), "thm1.residual/bandit,0,1e-10,pass");
    EXPECT_EQ(report_line({"init.try2/x", 0.5, 1e-3, true}), "init.try2/x,0.5,>=0.001,pass");
    EXPECT_EQ(report_line({"g", 2.0, 1.0, false}), "g,2,1,fail");
    std::ostringstream s;
    write_report({{"g", 2.0, 1.0, false}}, s);
    EXPECT_EQ(s.str(), "id,max_residual,tolerance,status\ng,2,1,fail\n");
}

TEST(Fixtures, TheoremsHoldEverywhere) {
    for (const Fixture& f : standard_fixtures()) {
        EXPECT_TRUE(all_pass(check_thm1(f))) << f.name;
        EXPECT_TRUE(all_pass(check_thm2(f))) << f.name;
        EXPECT_TRUE(all_pass(check_thm3(f))) << f.name;
        EXPECT_TRUE(all_pass(check_thm4(f))) << f.name;
    }
}

TEST(Fixtures, SampledMultiStepIdentity) {
    VerifyOptions opt;
    opt.trajectory_cap = 10;
    for (const Fixture& f : standard_fixtures()) EXPECT_TRUE(all_pass(check_thm4(f, opt))) << f.name;
}

TEST(Fixtures, ValueLinks) {
    for (const Fixture& f : value_link_fixtures()) EXPECT_TRUE(check_value_link(f).passed()) << f.name;
}

TEST(Fixtures, UniqueFixedPoints) {
    for (const Fixture& f : standard_fixtures()) EXPECT_TRUE(all_pass(check_uniqueness(f))) << f.name;
}

TEST(InitContrast, ZeroRewardBandit) {
    const Fixture f = zero_reward_fixtures().front();
    const InitContrast d = init_contrast(f.mdp, f.ref, f.beta);
    EXPECT_EQ(d.shiq, 0.0);
    EXPECT_EQ(d.shiq_ms, 0.0);
    EXPECT_GE(d.try2, 1e-3);
    EXPECT_GE(d.shiq_init, 1e-3);
}

TEST(Propagation, LastTokenOnlyForMultiStepSum) {
    const Propagation p = propagation(6);
    EXPECT_EQ(p.first_step_depths_ms, std::vector<int>{6});
    EXPECT_EQ(p.first_step_depths_shiq, (std::vector<int>{1, 2, 3, 4, 5, 6}));
    EXPECT_GE(p.steps_depth1_ms, 6);
    EXPECT_EQ(p.steps_depth1_shiq, 1);
    EXPECT_TRUE(all_pass(check_propagation(6)));
}

TEST(Faults, OracleFaultFailsTheorems) {
    VerifyOptions opt;
    opt.fault = Fault::oracle;
    const Fixture f = standard_fixtures().front();
    EXPECT_FALSE(all_pass(check_thm1(f, opt)));
    EXPECT_FALSE(all_pass(check_thm3(f, opt)));
}

TEST(Faults, GradientFaultFailsGradientCheck) {
    VerifyOptions opt;
    opt.fault = Fault::gradient;
    const Fixture f = standard_fixtures().front();
    EXPECT_TRUE(all_pass(check_gradients(f)));
    EXPECT_FALSE(all_pass(check_gradients(f, opt)));
}

TEST(Faults, Parse) {
    EXPECT_EQ(parse_fault("none"), Fault::none);
    EXPECT_EQ(parse_fault("oracle"), Fault::oracle);
    EXPECT_EQ(parse_fault("gradient"), Fault::gradient);
    EXPECT_THROW(parse_fault("cosmic-ray"), ValidationError);
}

TEST(Suite, PassesAndStreamsProgress) {
    std::size_t seen = 0;
    const std::vector<Check> all = run_suite({}, [&](const Check&) { ++seen; });
    EXPECT_EQ(seen, all.size());
    EXPECT_GT(all.size(), 100u);
    for (const auto& c : all) EXPECT_TRUE(c.passed()) << report_line(c);
}

} // namespace
