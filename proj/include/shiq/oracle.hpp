#pragma once

#include "shiq/mdp.hpp"
#include "shiq/parallel.hpp"
#include "shiq/policy.hpp"

#include <cstddef>
#include <string>
#include <vector>

namespace shiq {

/**
 * Exact solution of the KL-regularized control problem on an enumerated MDP.
 *
 * q_star is laid out per pair, v_star per state. The reference logits and
 * log-partitions are kept so the logit-space fixed points can be rebuilt.
 */
struct OracleSolution {
    MdpPtr mdp;
    double beta = 1.0;
    std::vector<double> q_star;
    std::vector<double> v_star;
    PolicyTable pi_star;
    LogitTable ref;

    /// E over the prompt distribution of v_star.
    double optimal_value() const;

    /// q* as a tabular model.
    LogitsModel q_model() const;
    /// g = (q* + beta ln pi_ref) / beta.
    LogitsModel g_model() const;
    /// l = g + v_ref = l_ref + q* / beta.
    LogitsModel l_model() const;
};

OracleSolution backward_induction(MdpPtr mdp, const LogitsModel& ref, double beta, Execution exec = Execution::parallel);

/// Exact expectations under a policy, by dynamic programming over the enumerated states.
struct PolicyMetrics {
    double objective = 0.0;       ///< J = reward - beta * kl
    double reward = 0.0;          ///< E sum_t gamma^(t-1) r_t
    double kl = 0.0;              ///< E sum_t gamma^(t-1) KL(pi(.|s_t) || pi_ref(.|s_t))
    double success = 0.0;         ///< probability of taking a goal-reaching transition
    bool infinite_kl = false;     ///< pi puts mass where pi_ref has none
};

PolicyMetrics evaluate_policy(const PolicyTable& policy, const PolicyTable& ref, double beta);

/// J(pi); -inf when the KL term is infinite.
double evaluate_J(const PolicyTable& policy, const PolicyTable& ref, double beta);
double evaluate_J(const LogitsModel& policy, const LogitsModel& ref, double beta);
/// J(pi*) - J(pi); +inf when the KL term is infinite.
double regret(const OracleSolution& oracle, const PolicyTable& policy);
double regret(const OracleSolution& oracle, const LogitsModel& policy);
/// +inf when the KL term is infinite.
double expected_kl(const PolicyTable& policy, const PolicyTable& ref);
double expected_kl(const LogitsModel& policy, const LogitsModel& ref);

inline constexpr std::size_t kDefaultCompletionCap = 1'000'000;

/// beta ln sum_y pi_ref(y|x) exp(R(x, y) / beta), by enumerating every completion of `prompt`.
/// Requires gamma_base == 1.
double sequence_value(const TokenMdp& mdp, const LogitsModel& ref, double beta, StateId prompt,
                      std::size_t cap = kDefaultCompletionCap);

/// Every completion of every initial state, in depth-first slot order; ResourceError above `cap`.
std::vector<Trajectory> enumerate_trajectories(const TokenMdp& mdp, std::size_t cap);

/// Writes q* in checkpoint format and a state,time,v_star CSV.
void export_solution(const OracleSolution& oracle, const std::string& checkpoint_path, const std::string& values_path);

} // namespace shiq
