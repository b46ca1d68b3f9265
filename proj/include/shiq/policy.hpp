#pragma once

#include "shiq/mdp.hpp"
#include "shiq/numeric.hpp"
#include "shiq/parallel.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace shiq {

enum class ModelKind : std::uint32_t { tabular = 1, linear = 2 };

/**
 * Parameters mapping admissible (state, action) pairs to logits.
 *
 * Tabular models hold one parameter per pair, laid out by TokenMdp::pair_offset.
 * Linear models hold a [vocabulary x feature_dim] weight block (row-major) followed
 * by one bias per vocabulary entry; logit(s, a) = w_a . phi(s) + b_a.
 * The softmax always ranges over the admissible actions of the state only.
 */
class LogitsModel {
public:
    static LogitsModel tabular(MdpPtr mdp, double fill = 0.0);
    static LogitsModel linear(MdpPtr mdp);

    ModelKind kind() const noexcept { return kind_; }
    const TokenMdp& mdp() const noexcept { return *mdp_; }
    const MdpPtr& mdp_ptr() const noexcept { return mdp_; }

    std::size_t parameter_count() const noexcept { return params_.size(); }
    std::span<double> parameters() noexcept { return params_; }
    std::span<const double> parameters() const noexcept { return params_; }
    void set_parameters(std::span<const double> values);

    double logit(StateId s, std::size_t slot) const;
    /// Writes the logits of every admissible action of `s`, in slot order.
    void logits(StateId s, std::span<double> out) const;

    /// param_grad += J^T pair_grad, where pair_grad holds dL/dlogit per pair index.
    void accumulate_gradient(std::span<const double> pair_grad, std::span<double> param_grad) const;

private:
    LogitsModel(ModelKind kind, MdpPtr mdp, std::size_t n);

    ModelKind kind_;
    MdpPtr mdp_;
    std::vector<double> params_;
};

/// Full evaluation of a model: every pair's logit and every state's log-partition.
struct LogitTable {
    MdpPtr mdp;
    std::vector<double> logit;         ///< per pair
    std::vector<double> log_partition; ///< per state

    double log_prob(std::size_t pair, StateId s) const { return logit[pair] - log_partition[static_cast<std::size_t>(s)]; }
};

LogitTable evaluate_logits(const LogitsModel& model, Execution exec = Execution::parallel);

/**
 * Explicit action distribution per state. Zero entries are allowed, which is
 * how degenerate behaviour policies and greedy policies are represented.
 */
struct PolicyTable {
    MdpPtr mdp;
    std::vector<double> prob;     ///< per pair
    std::vector<double> log_prob; ///< per pair, -inf where prob == 0

    static PolicyTable from_logits(const LogitTable& table);
    static PolicyTable from_model(const LogitsModel& model);
    static PolicyTable uniform(MdpPtr mdp);
    /// Validates that each state's probabilities are nonnegative and sum to 1 (1e-9).
    static PolicyTable from_probabilities(MdpPtr mdp, std::vector<double> prob);
    /// Argmax action per state (lowest slot on ties).
    static PolicyTable greedy(const LogitsModel& model);

    std::span<const double> at(StateId s) const;
};

/// v(s) = ln sum_{a admissible} exp logit(s, a), max-shifted.
double log_partition(const LogitsModel& model, StateId s);
double log_prob(const LogitsModel& model, StateId s, ActionId action);

/// New tabular model with logit'(s, a) = logit(s, a) + phi(s).
LogitsModel shift_by_state_fn(const LogitsModel& model, const std::function<double(StateId)>& phi);

/// KL(pi_model(.|s) || pi_ref(.|s)).
double token_kl(const LogitsModel& model, const LogitsModel& ref, StateId s);

/// Samples a trajectory action by action; the prompt is drawn from the MDP's initial distribution.
Trajectory sample_trajectory(const PolicyTable& policy, std::uint64_t seed);
Trajectory sample_trajectory(const LogitsModel& model, std::uint64_t seed);
/// Same, reusing an external generator (used by batched generation).
Trajectory sample_trajectory(const PolicyTable& policy, SplitMix64& rng);
StateId sample_prompt(const TokenMdp& mdp, SplitMix64& rng);
/// Samples from a fixed prompt.
Trajectory sample_completion(const PolicyTable& policy, StateId prompt, SplitMix64& rng);

} // namespace shiq
