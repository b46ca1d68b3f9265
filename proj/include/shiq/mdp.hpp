#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace shiq {

using StateId = std::int32_t;
using ActionId = std::int32_t;

/// Canonical byte encoding of an environment state. Every key embeds its time index.
using StateKey = std::string;

/// Successor of a transition whose discount is zero.
inline constexpr StateId kTerminalState = -1;

/// Result of one environment step, before the horizon cap is applied.
struct EnvStep {
    StateKey next;
    double reward = 0.0;
    bool terminal = false; ///< eos or an environment-defined end such as reaching a goal
    bool success = false;  ///< marks goal-reaching transitions (grid-world)
};

struct FeatureEntry {
    std::size_t index;
    double value;
};

/**
 * Deterministic finite-horizon dynamics over canonical state keys.
 *
 * Implementations describe one environment; TokenMdp enumerates the reachable
 * state space from them and applies the horizon cap.
 */
class Environment {
public:
    virtual ~Environment() = default;

    virtual std::string name() const = 0;
    virtual int vocabulary_size() const = 0;
    virtual std::optional<ActionId> eos_action() const { return std::nullopt; }
    virtual int t_max() const = 0;
    virtual double gamma() const = 0;

    /// Prompt distribution; weights need not be normalized.
    virtual std::vector<std::pair<StateKey, double>> initial_states() const = 0;
    /// Admissible actions in ascending order.
    virtual std::vector<ActionId> admissible_actions(const StateKey& key, int time) const = 0;
    virtual EnvStep step(const StateKey& key, ActionId action, int time) const = 0;

    /// Dimension of the linear-policy feature map; 0 selects one-hot state features.
    virtual std::size_t feature_dim() const { return 0; }
    virtual std::vector<FeatureEntry> features(const StateKey&) const { return {}; }

    virtual std::string describe(const StateKey& key) const;
    virtual std::string action_name(ActionId action) const { return std::to_string(action); }
};

struct Transition {
    ActionId action;
    StateId next; ///< kTerminalState when discount == 0
    double reward;
    double discount;
    bool success;
};

struct InitialState {
    StateId state;
    double weight; ///< normalized, sums to 1
};

/// Prompt plus completion with per-step rewards.
struct Trajectory {
    StateId prompt = 0;
    std::vector<ActionId> actions;
    std::vector<double> step_rewards;
    bool terminated = false;

    bool operator==(const Trajectory&) const = default;
};

/**
 * Finite-horizon deterministic token MDP, fully enumerated at construction.
 *
 * States are numbered in breadth-first order from the initial states, so a
 * given environment always yields the same numbering. Each (state, admissible
 * action) pair also gets a dense "pair index" used by tabular parameter layouts.
 * Immutable after construction.
 */
class TokenMdp {
public:
    static constexpr std::size_t kDefaultPairCap = 5'000'000;

    explicit TokenMdp(std::shared_ptr<const Environment> env, std::size_t pair_cap = kDefaultPairCap);

    const std::string& name() const noexcept { return name_; }
    const Environment& environment() const noexcept { return *env_; }
    int vocabulary_size() const noexcept { return vocabulary_size_; }
    std::optional<ActionId> eos_action() const noexcept { return eos_; }
    int t_max() const noexcept { return t_max_; }
    double gamma_base() const noexcept { return gamma_; }

    std::size_t state_count() const noexcept { return time_.size(); }
    std::size_t pair_count() const noexcept { return transitions_.size(); }
    std::span<const InitialState> initial_states() const noexcept { return initial_; }
    int time_of(StateId s) const;
    /// States whose time index equals `time` (1-based), ascending.
    std::span<const StateId> states_at_time(int time) const;

    std::span<const Transition> transitions(StateId s) const;
    std::size_t pair_offset(StateId s) const;
    std::size_t action_count(StateId s) const { return transitions(s).size(); }
    /// Position of `action` in the admissible list of `s`, or -1.
    int slot_of(StateId s, ActionId action) const;
    bool admissible(StateId s, ActionId action) const { return slot_of(s, action) >= 0; }
    const Transition& transition_info(StateId s, ActionId action) const;

    /// Successor of (s, action); kTerminalState when the transition ends the episode.
    StateId transition(StateId s, ActionId action) const { return transition_info(s, action).next; }
    /// Per-transition discount: 0 on termination (eos, goal, horizon), gamma_base otherwise.
    double step_discount(StateId s, ActionId action) const { return transition_info(s, action).discount; }
    /// Generic horizon/eos rule: 0 iff action is eos or time == t_max.
    double discount_rule(ActionId action, int time) const;
    double reward(StateId s, ActionId action) const { return transition_info(s, action).reward; }

    const StateKey& key(StateId s) const;
    std::optional<StateId> find(const StateKey& key) const;
    std::string describe(StateId s) const { return env_->describe(key(s)); }

    std::size_t feature_dim() const noexcept { return feature_dim_; }
    std::span<const FeatureEntry> features(StateId s) const;

    /// Replays `traj` and returns the visited states s_1..s_T; validates admissibility,
    /// the termination flag and the recorded rewards.
    std::vector<StateId> walk(const Trajectory& traj) const;
    /// sum_t gamma^(t-1) r_t with the scalar gamma_base.
    double return_of(const Trajectory& traj) const;
    /// Builds the trajectory that follows `actions` from `prompt`, recording MDP rewards.
    Trajectory rollout(StateId prompt, std::span<const ActionId> actions) const;

private:
    void check_state(StateId s) const;

    std::shared_ptr<const Environment> env_;
    std::string name_;
    int vocabulary_size_ = 0;
    std::optional<ActionId> eos_;
    int t_max_ = 0;
    double gamma_ = 1.0;

    std::vector<StateKey> keys_;
    std::unordered_map<StateKey, StateId> index_;
    std::vector<int> time_;
    std::vector<std::size_t> offsets_; // size state_count + 1
    std::vector<Transition> transitions_;
    std::vector<std::vector<StateId>> layers_;
    std::vector<InitialState> initial_;

    std::size_t feature_dim_ = 0;
    std::vector<std::size_t> feature_offsets_;
    std::vector<FeatureEntry> feature_entries_;
};

using MdpPtr = std::shared_ptr<const TokenMdp>;

/// Token-level lifting of a sequence reward: zeros, then `sequence_reward` on the last step.
std::vector<double> lift_sequence_reward(double sequence_reward, std::size_t length);

// ---------------------------------------------------------------------------
// Environments

MdpPtr make_bandit(std::vector<double> rewards);

struct Cell {
    int row = 1;
    int col = 1;
    bool operator==(const Cell&) const = default;
};

struct Treasure {
    Cell cell;
    double value = 0.0;
};

enum GridAction : ActionId { kUp = 0, kDown = 1, kLeft = 2, kRight = 3 };

struct GridConfig {
    int rows = 5;
    int cols = 5;
    Cell start{1, 1};
    Cell goal{5, 5};
    double goal_reward = 7.0;
    std::vector<Treasure> treasures;
    double step_penalty = 0.05;
    double gamma = 0.99;
    int t_max = 40;

    static GridConfig final_reward();
    static GridConfig fine_grained();
};

MdpPtr make_gridworld(const GridConfig& config);

/// Reward entry of a token chain: `reward` when `token` (or any token if -1) is chosen at `depth`.
struct ChainReward {
    int depth = 1;
    ActionId token = 0;
    double value = 0.0;
};

using SequenceReward = std::function<double(int prompt, std::span<const ActionId> completion)>;

struct ChainConfig {
    int length = 6; ///< also the horizon cap
    int vocabulary = 2;
    std::optional<ActionId> eos;
    double gamma = 1.0;
    int prompts = 1;
    std::vector<ChainReward> schedule;
    /// Optional sequence-level reward granted on the terminating step.
    SequenceReward sequence_reward;
    /// Non-zero seed adds a pseudo-random reward in [-1, 1] to every (state, action).
    std::uint64_t dense_reward_seed = 0;
};

MdpPtr make_token_chain(const ChainConfig& config);

} // namespace shiq
