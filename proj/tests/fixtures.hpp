#pragma once

#include "shiq/losses.hpp"
#include "shiq/mdp.hpp"
#include "shiq/numeric.hpp"
#include "shiq/oracle.hpp"
#include "shiq/policy.hpp"

#include <memory>
#include <vector>

namespace shiq::testing {

inline MdpPtr three_arm_bandit() { return make_bandit({2.5, 2.0, 1.0}); }

inline MdpPtr zero_bandit() { return make_bandit({0.0, 0.0, 0.0}); }

inline MdpPtr terminal_chain(int length, double reward = 1.0) {
    ChainConfig c;
    c.length = length;
    c.schedule = {{length, 0, reward}};
    return make_token_chain(c);
}

inline MdpPtr multi_turn_chain() {
    ChainConfig c;
    c.length = 6;
    c.schedule = {{3, 1, 0.5}, {6, 0, 1.0}};
    return make_token_chain(c);
}

/// Eos token, discount < 1, two prompts and dense rewards: exercises every branch of the discount rule.
inline MdpPtr dense_chain(int length = 3, double gamma = 0.9) {
    ChainConfig c;
    c.length = length;
    c.vocabulary = 3;
    c.eos = 2;
    c.gamma = gamma;
    c.prompts = 2;
    c.dense_reward_seed = 17;
    return make_token_chain(c);
}

/// Undiscounted dense-reward chain without eos, for sequence-level identities.
inline MdpPtr sequence_chain(int length) {
    ChainConfig c;
    c.length = length;
    c.vocabulary = 2;
    c.dense_reward_seed = 5;
    return make_token_chain(c);
}

inline MdpPtr small_grid(bool treasure) {
    GridConfig c = treasure ? GridConfig::fine_grained() : GridConfig::final_reward();
    c.rows = 3;
    c.cols = 3;
    c.goal = {3, 3};
    c.t_max = 6;
    if (treasure) c.treasures = {{{1, 3}, 2.0}};
    return make_gridworld(c);
}

inline LogitsModel random_tabular(const MdpPtr& mdp, std::uint64_t seed, double scale = 1.0) {
    LogitsModel m = LogitsModel::tabular(mdp);
    SplitMix64 rng(seed);
    for (double& p : m.parameters()) p = scale * (2.0 * rng.uniform() - 1.0);
    return m;
}

inline LogitsModel random_linear(const MdpPtr& mdp, std::uint64_t seed, double scale = 0.5) {
    LogitsModel m = LogitsModel::linear(mdp);
    SplitMix64 rng(seed);
    for (double& p : m.parameters()) p = scale * (2.0 * rng.uniform() - 1.0);
    return m;
}

inline std::vector<Trajectory> sample_many(const PolicyTable& policy, std::size_t n, std::uint64_t seed) {
    SplitMix64 rng(seed);
    std::vector<Trajectory> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(sample_trajectory(policy, rng));
    return out;
}

inline std::shared_ptr<const TrajectoryStore> store_of(const MdpPtr& mdp, std::vector<Trajectory> trajs) {
    return std::make_shared<const TrajectoryStore>(mdp, std::move(trajs));
}

/// Every trajectory once, paired consecutively (same prompt) with preferences by return,
/// plus consecutive same-prompt groups of two.
inline LossBatch full_batch(const MdpPtr& mdp, double beta, std::size_t cap = 10'000) {
    auto trajs = enumerate_trajectories(*mdp, cap);
    LossBatch b = LossBatch::all(store_of(mdp, trajs), beta);
    for (std::size_t i = 0; i + 1 < trajs.size(); ++i) {
        if (trajs[i].prompt != trajs[i + 1].prompt) continue;
        const double ri = mdp->return_of(trajs[i]), rj = mdp->return_of(trajs[i + 1]);
        const Preference pref = ri > rj ? Preference::first : (ri < rj ? Preference::second : Preference::unmarked);
        if (pref != Preference::unmarked) b.pairs.push_back({i, i + 1, pref});
        if (i % 2 == 0) b.groups.push_back({i, i + 1});
    }
    return b;
}

} // namespace shiq::testing
