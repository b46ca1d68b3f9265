#include "shiq/oracle.hpp"

#include "shiq/checkpoint.hpp"
#include "shiq/errors.hpp"

#include <cmath>
#include <fstream>
#include <limits>

namespace shiq {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_beta(double beta) {
    if (!(beta > 0.0) || !std::isfinite(beta)) throw ValidationError("beta must be a positive finite number");
}

double prompt_average(const TokenMdp& mdp, const std::vector<double>& per_state) {
    double total = 0.0;
    for (const InitialState& i : mdp.initial_states()) total += i.weight * per_state[static_cast<std::size_t>(i.state)];
    return total;
}

} // namespace

// ---------------------------------------------------------------------------
// OracleSolution

double OracleSolution::optimal_value() const { return prompt_average(*mdp, v_star); }

LogitsModel OracleSolution::q_model() const {
    LogitsModel m = LogitsModel::tabular(mdp);
    m.set_parameters(q_star);
    return m;
}

LogitsModel OracleSolution::g_model() const {
    LogitsModel m = LogitsModel::tabular(mdp);
    auto p = m.parameters();
    for (std::size_t si = 0; si < mdp->state_count(); ++si) {
        const auto s = static_cast<StateId>(si);
        const std::size_t off = mdp->pair_offset(s);
        for (std::size_t k = 0; k < mdp->action_count(s); ++k)
            p[off + k] = (q_star[off + k] + beta * ref.log_prob(off + k, s)) / beta;
    }
    return m;
}

LogitsModel OracleSolution::l_model() const {
    LogitsModel m = g_model();
    return shift_by_state_fn(m, [&](StateId s) { return ref.log_partition[static_cast<std::size_t>(s)]; });
}

OracleSolution backward_induction(MdpPtr mdp, const LogitsModel& ref, double beta, Execution exec) {
    check_beta(beta);
    if (!mdp) throw ValidationError("backward_induction: null MDP");
    if (&ref.mdp() != mdp.get()) throw ValidationError("backward_induction: reference model belongs to another MDP");

    OracleSolution sol;
    sol.mdp = mdp;
    sol.beta = beta;
    sol.ref = evaluate_logits(ref, exec);
    sol.q_star.assign(mdp->pair_count(), 0.0);
    sol.v_star.assign(mdp->state_count(), 0.0);
    std::vector<double> prob(mdp->pair_count(), 0.0);

    auto solve_state = [&](StateId s) {
        const auto trs = mdp->transitions(s);
        const std::size_t off = mdp->pair_offset(s);
        double m = -kInf;
        for (std::size_t k = 0; k < trs.size(); ++k) {
            const Transition& tr = trs[k];
            const double next_v = tr.next == kTerminalState ? 0.0 : sol.v_star[static_cast<std::size_t>(tr.next)];
            sol.q_star[off + k] = tr.reward + tr.discount * next_v;
            m = std::max(m, sol.ref.log_prob(off + k, s) + sol.q_star[off + k] / beta);
        }
        double z = 0.0;
        for (std::size_t k = 0; k < trs.size(); ++k) {
            prob[off + k] = std::exp(sol.ref.log_prob(off + k, s) + sol.q_star[off + k] / beta - m);
            z += prob[off + k];
        }
        for (std::size_t k = 0; k < trs.size(); ++k) prob[off + k] /= z;
        sol.v_star[static_cast<std::size_t>(s)] = beta * (m + std::log(z));
    };

    for (int t = mdp->t_max(); t >= 1; --t) {
        const auto layer = mdp->states_at_time(t);
        const auto n = static_cast<std::int64_t>(layer.size());
        if (exec == Execution::parallel) {
#pragma omp parallel for schedule(static) num_threads(worker_count())
            for (std::int64_t i = 0; i < n; ++i) solve_state(layer[static_cast<std::size_t>(i)]);
        } else {
            for (std::int64_t i = 0; i < n; ++i) solve_state(layer[static_cast<std::size_t>(i)]);
        }
    }

    sol.pi_star.mdp = mdp;
    sol.pi_star.log_prob.resize(prob.size());
    for (std::size_t i = 0; i < prob.size(); ++i) sol.pi_star.log_prob[i] = prob[i] > 0.0 ? std::log(prob[i]) : -kInf;
    sol.pi_star.prob = std::move(prob);
    return sol;
}

// ---------------------------------------------------------------------------
// Policy evaluation

PolicyMetrics evaluate_policy(const PolicyTable& policy, const PolicyTable& ref, double beta) {
    check_beta(beta);
    const TokenMdp& mdp = *policy.mdp;
    if (ref.mdp.get() != &mdp) throw ValidationError("evaluate_policy: policies belong to different MDPs");

    const std::size_t n = mdp.state_count();
    std::vector<double> reward(n, 0.0), kl(n, 0.0), success(n, 0.0);
    for (int t = mdp.t_max(); t >= 1; --t) {
        for (StateId s : mdp.states_at_time(t)) {
            const auto trs = mdp.transitions(s);
            const std::size_t off = mdp.pair_offset(s);
            double r = 0.0, k = 0.0, g = 0.0;
            for (std::size_t j = 0; j < trs.size(); ++j) {
                const double p = policy.prob[off + j];
                if (p == 0.0) continue;
                const Transition& tr = trs[j];
                const auto nx = static_cast<std::size_t>(tr.next);
                const bool end = tr.next == kTerminalState;
                r += p * (tr.reward + (end ? 0.0 : tr.discount * reward[nx]));
                if (ref.prob[off + j] == 0.0)
                    k = kInf;
                else
                    k += p * ((policy.log_prob[off + j] - ref.log_prob[off + j]) + (end ? 0.0 : tr.discount * kl[nx]));
                g += p * (tr.success ? 1.0 : (end ? 0.0 : success[nx]));
            }
            const auto si = static_cast<std::size_t>(s);
            reward[si] = r;
            kl[si] = k;
            success[si] = g;
        }
    }

    PolicyMetrics out;
    out.reward = prompt_average(mdp, reward);
    out.success = prompt_average(mdp, success);
    const double total_kl = prompt_average(mdp, kl);
    out.infinite_kl = std::isinf(total_kl);
    out.kl = out.infinite_kl ? kInf : std::max(total_kl, 0.0);
    out.objective = out.infinite_kl ? -kInf : out.reward - beta * total_kl;
    return out;
}

double evaluate_J(const PolicyTable& policy, const PolicyTable& ref, double beta) {
    return evaluate_policy(policy, ref, beta).objective;
}

double evaluate_J(const LogitsModel& policy, const LogitsModel& ref, double beta) {
    return evaluate_J(PolicyTable::from_model(policy), PolicyTable::from_model(ref), beta);
}

double regret(const OracleSolution& oracle, const PolicyTable& policy) {
    const double j = evaluate_J(policy, PolicyTable::from_logits(oracle.ref), oracle.beta);
    if (j == -kInf) return kInf;
    return oracle.optimal_value() - j;
}

double regret(const OracleSolution& oracle, const LogitsModel& policy) {
    return regret(oracle, PolicyTable::from_model(policy));
}

double expected_kl(const PolicyTable& policy, const PolicyTable& ref) { return evaluate_policy(policy, ref, 1.0).kl; }

double expected_kl(const LogitsModel& policy, const LogitsModel& ref) {
    return expected_kl(PolicyTable::from_model(policy), PolicyTable::from_model(ref));
}

// ---------------------------------------------------------------------------
// Enumeration

namespace {

template <class Visit>
void for_each_completion(const TokenMdp& mdp, StateId prompt, std::size_t cap, Visit&& visit) {
    std::size_t count = 0;
    std::vector<ActionId> actions;
    std::vector<double> rewards;
    std::vector<std::size_t> pairs;
    auto rec = [&](auto&& self, StateId s) -> void {
        const auto trs = mdp.transitions(s);
        const std::size_t off = mdp.pair_offset(s);
        for (std::size_t k = 0; k < trs.size(); ++k) {
            actions.push_back(trs[k].action);
            rewards.push_back(trs[k].reward);
            pairs.push_back(off + k);
            if (trs[k].next == kTerminalState) {
                if (++count > cap)
                    throw ResourceError("completion count from " + mdp.describe(prompt) + " exceeds cap " + std::to_string(cap));
                visit(actions, rewards, pairs);
            } else {
                self(self, trs[k].next);
            }
            actions.pop_back();
            rewards.pop_back();
            pairs.pop_back();
        }
    };
    rec(rec, prompt);
}

} // namespace

double sequence_value(const TokenMdp& mdp, const LogitsModel& ref, double beta, StateId prompt, std::size_t cap) {
    check_beta(beta);
    if (mdp.gamma_base() != 1.0) throw DomainError("sequence_value: requires gamma_base == 1");
    const LogitTable lt = evaluate_logits(ref);
    double m = -kInf, acc = 0.0;
    for_each_completion(mdp, prompt, cap,
                        [&](const std::vector<ActionId>&, const std::vector<double>& rewards, const std::vector<std::size_t>& pairs) {
                            const auto states = pairs.size();
                            double term = 0.0, ret = 0.0;
                            for (std::size_t i = 0; i < states; ++i) ret += rewards[i];
                            StateId s = prompt;
                            for (std::size_t i = 0; i < states; ++i) {
                                term += lt.log_prob(pairs[i], s);
                                const auto trs = mdp.transitions(s);
                                s = trs[pairs[i] - mdp.pair_offset(s)].next;
                            }
                            term += ret / beta;
                            if (term > m) {
                                acc = acc * std::exp(m - term) + 1.0;
                                m = term;
                            } else {
                                acc += std::exp(term - m);
                            }
                        });
    return beta * (m + std::log(acc));
}

std::vector<Trajectory> enumerate_trajectories(const TokenMdp& mdp, std::size_t cap) {
    std::vector<Trajectory> out;
    for (const InitialState& init : mdp.initial_states()) {
        const std::size_t left = cap >= out.size() ? cap - out.size() : 0;
        for_each_completion(mdp, init.state, left,
                            [&](const std::vector<ActionId>& actions, const std::vector<double>& rewards, const std::vector<std::size_t>&) {
                                out.push_back(Trajectory{init.state, actions, rewards, true});
                            });
    }
    return out;
}

void export_solution(const OracleSolution& oracle, const std::string& checkpoint_path, const std::string& values_path) {
    save_checkpoint(oracle.q_model(), checkpoint_path);
    std::ofstream os(values_path);
    if (!os) throw ResourceError("cannot open " + values_path);
    os.precision(17);
    os << "state,time,v_star\n";
    for (std::size_t s = 0; s < oracle.v_star.size(); ++s)
        os << s << ',' << oracle.mdp->time_of(static_cast<StateId>(s)) << ',' << oracle.v_star[s] << '\n';
    if (!os) throw ResourceError("write failed: " + values_path);
}

} // namespace shiq
