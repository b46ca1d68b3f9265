#include "shiq/policy.hpp"

#include "shiq/errors.hpp"

#include <algorithm>
#include <cmath>

namespace shiq {

LogitsModel::LogitsModel(ModelKind kind, MdpPtr mdp, std::size_t n)
    : kind_(kind), mdp_(std::move(mdp)), params_(n, 0.0) {}

LogitsModel LogitsModel::tabular(MdpPtr mdp, double fill) {
    if (!mdp) throw ValidationError("LogitsModel: null MDP");
    LogitsModel m(ModelKind::tabular, mdp, mdp->pair_count());
    std::fill(m.params_.begin(), m.params_.end(), fill);
    return m;
}

LogitsModel LogitsModel::linear(MdpPtr mdp) {
    if (!mdp) throw ValidationError("LogitsModel: null MDP");
    const auto v = static_cast<std::size_t>(mdp->vocabulary_size());
    return {ModelKind::linear, mdp, v * mdp->feature_dim() + v};
}

void LogitsModel::set_parameters(std::span<const double> values) {
    if (values.size() != params_.size())
        throw ValidationError("LogitsModel: expected " + std::to_string(params_.size()) + " parameters, got " +
                              std::to_string(values.size()));
    std::copy(values.begin(), values.end(), params_.begin());
}

double LogitsModel::logit(StateId s, std::size_t slot) const {
    const auto trs = mdp_->transitions(s);
    if (slot >= trs.size()) throw DomainError("slot out of range at state " + mdp_->describe(s));
    if (kind_ == ModelKind::tabular) return params_[mdp_->pair_offset(s) + slot];
    const auto a = static_cast<std::size_t>(trs[slot].action);
    const std::size_t dim = mdp_->feature_dim();
    const auto v = static_cast<std::size_t>(mdp_->vocabulary_size());
    double z = params_[v * dim + a];
    for (const FeatureEntry& f : mdp_->features(s)) z += params_[a * dim + f.index] * f.value;
    return z;
}

void LogitsModel::logits(StateId s, std::span<double> out) const {
    const auto trs = mdp_->transitions(s);
    if (out.size() < trs.size()) throw ValidationError("logits: output buffer too small");
    if (kind_ == ModelKind::tabular) {
        const std::size_t off = mdp_->pair_offset(s);
        std::copy_n(params_.begin() + static_cast<std::ptrdiff_t>(off), trs.size(), out.begin());
        return;
    }
    for (std::size_t k = 0; k < trs.size(); ++k) out[k] = logit(s, k);
}

void LogitsModel::accumulate_gradient(std::span<const double> pair_grad, std::span<double> param_grad) const {
    if (pair_grad.size() != mdp_->pair_count() || param_grad.size() != params_.size())
        throw ValidationError("accumulate_gradient: size mismatch");
    if (kind_ == ModelKind::tabular) {
        for (std::size_t i = 0; i < pair_grad.size(); ++i) param_grad[i] += pair_grad[i];
        return;
    }
    const std::size_t dim = mdp_->feature_dim();
    const auto v = static_cast<std::size_t>(mdp_->vocabulary_size());
    for (std::size_t si = 0; si < mdp_->state_count(); ++si) {
        const auto s = static_cast<StateId>(si);
        const auto trs = mdp_->transitions(s);
        const std::size_t off = mdp_->pair_offset(s);
        const auto feats = mdp_->features(s);
        for (std::size_t k = 0; k < trs.size(); ++k) {
            const double g = pair_grad[off + k];
            if (g == 0.0) continue;
            const auto a = static_cast<std::size_t>(trs[k].action);
            param_grad[v * dim + a] += g;
            for (const FeatureEntry& f : feats) param_grad[a * dim + f.index] += g * f.value;
        }
    }
}

LogitTable evaluate_logits(const LogitsModel& model, Execution exec) {
    const TokenMdp& mdp = model.mdp();
    LogitTable t{model.mdp_ptr(), std::vector<double>(mdp.pair_count()), std::vector<double>(mdp.state_count())};
    const auto n = static_cast<std::int64_t>(mdp.state_count());
    auto kernel = [&](std::int64_t i) {
        const auto s = static_cast<StateId>(i);
        const std::size_t off = mdp.pair_offset(s);
        const std::size_t k = mdp.action_count(s);
        std::span<double> out(t.logit.data() + off, k);
        model.logits(s, out);
        t.log_partition[static_cast<std::size_t>(i)] = log_sum_exp(out);
    };
    if (exec == Execution::parallel) {
#pragma omp parallel for schedule(static) num_threads(worker_count())
        for (std::int64_t i = 0; i < n; ++i) kernel(i);
    } else {
        for (std::int64_t i = 0; i < n; ++i) kernel(i);
    }
    return t;
}

// ---------------------------------------------------------------------------
// PolicyTable

PolicyTable PolicyTable::from_logits(const LogitTable& table) {
    const TokenMdp& mdp = *table.mdp;
    PolicyTable p{table.mdp, std::vector<double>(mdp.pair_count()), std::vector<double>(mdp.pair_count())};
    for (std::size_t si = 0; si < mdp.state_count(); ++si) {
        const auto s = static_cast<StateId>(si);
        const std::size_t off = mdp.pair_offset(s);
        for (std::size_t k = 0; k < mdp.action_count(s); ++k) {
            p.log_prob[off + k] = table.log_prob(off + k, s);
            p.prob[off + k] = std::exp(p.log_prob[off + k]);
        }
    }
    return p;
}

PolicyTable PolicyTable::from_model(const LogitsModel& model) { return from_logits(evaluate_logits(model)); }

PolicyTable PolicyTable::uniform(MdpPtr mdp) { return from_model(LogitsModel::tabular(std::move(mdp))); }

PolicyTable PolicyTable::from_probabilities(MdpPtr mdp, std::vector<double> prob) {
    if (!mdp) throw ValidationError("PolicyTable: null MDP");
    if (prob.size() != mdp->pair_count()) throw ValidationError("PolicyTable: one probability per pair expected");
    PolicyTable p{mdp, std::move(prob), std::vector<double>(mdp->pair_count())};
    for (std::size_t si = 0; si < mdp->state_count(); ++si) {
        const auto s = static_cast<StateId>(si);
        double total = 0.0;
        for (double v : p.at(s)) {
            if (!(v >= 0.0)) throw ValidationError("PolicyTable: negative probability at " + mdp->describe(s));
            total += v;
        }
        if (std::abs(total - 1.0) > 1e-9)
            throw ValidationError("PolicyTable: probabilities at " + mdp->describe(s) + " sum to " + std::to_string(total));
    }
    for (std::size_t i = 0; i < p.prob.size(); ++i) p.log_prob[i] = p.prob[i] > 0.0 ? std::log(p.prob[i]) : kNegInf;
    return p;
}

PolicyTable PolicyTable::greedy(const LogitsModel& model) {
    const TokenMdp& mdp = model.mdp();
    const LogitTable t = evaluate_logits(model);
    std::vector<double> prob(mdp.pair_count(), 0.0);
    for (std::size_t si = 0; si < mdp.state_count(); ++si) {
        const auto s = static_cast<StateId>(si);
        const std::size_t off = mdp.pair_offset(s);
        const std::size_t k = mdp.action_count(s);
        const auto first = t.logit.begin() + static_cast<std::ptrdiff_t>(off);
        const auto best = std::max_element(first, first + static_cast<std::ptrdiff_t>(k));
        prob[off + static_cast<std::size_t>(best - first)] = 1.0;
    }
    return from_probabilities(model.mdp_ptr(), std::move(prob));
}

std::span<const double> PolicyTable::at(StateId s) const {
    return {prob.data() + mdp->pair_offset(s), mdp->action_count(s)};
}

// ---------------------------------------------------------------------------

namespace {

std::vector<double> state_logits(const LogitsModel& model, StateId s) {
    std::vector<double> z(model.mdp().action_count(s));
    model.logits(s, z);
    return z;
}

} // namespace

double log_partition(const LogitsModel& model, StateId s) {
    const auto z = state_logits(model, s);
    if (z.empty()) throw DomainError("log_partition: empty action set at " + model.mdp().describe(s));
    return log_sum_exp(z);
}

double log_prob(const LogitsModel& model, StateId s, ActionId action) {
    const int slot = model.mdp().slot_of(s, action);
    if (slot < 0) throw DomainError("log_prob: action " + std::to_string(action) + " inadmissible at " + model.mdp().describe(s));
    const auto z = state_logits(model, s);
    return z[static_cast<std::size_t>(slot)] - log_sum_exp(z);
}

LogitsModel shift_by_state_fn(const LogitsModel& model, const std::function<double(StateId)>& phi) {
    if (model.kind() != ModelKind::tabular) throw UnsupportedError("shift_by_state_fn: only tabular models can be shifted");
    LogitsModel out = model;
    const TokenMdp& mdp = model.mdp();
    auto params = out.parameters();
    for (std::size_t si = 0; si < mdp.state_count(); ++si) {
        const auto s = static_cast<StateId>(si);
        const double shift = phi(s);
        const std::size_t off = mdp.pair_offset(s);
        for (std::size_t k = 0; k < mdp.action_count(s); ++k) params[off + k] += shift;
    }
    return out;
}

double token_kl(const LogitsModel& model, const LogitsModel& ref, StateId s) {
    const auto trs = model.mdp().transitions(s);
    if (&model.mdp() != &ref.mdp()) {
        const auto rtrs = ref.mdp().transitions(s);
        const bool same = trs.size() == rtrs.size() &&
                          std::equal(trs.begin(), trs.end(), rtrs.begin(),
                                     [](const Transition& a, const Transition& b) { return a.action == b.action; });
        if (!same) throw DomainError("token_kl: admissible sets differ at " + model.mdp().describe(s));
    }
    const auto z = state_logits(model, s);
    const auto zr = state_logits(ref, s);
    const double v = log_sum_exp(z), vr = log_sum_exp(zr);
    double kl = 0.0;
    for (std::size_t k = 0; k < z.size(); ++k) {
        const double lp = z[k] - v;
        const double p = std::exp(lp);
        if (p == 0.0) continue;
        kl += p * (lp - (zr[k] - vr));
    }
    return std::max(kl, 0.0);
}

namespace {

std::size_t draw(std::span<const double> w, SplitMix64& rng) {
    const double u = rng.uniform();
    double c = 0.0;
    std::size_t last = 0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        if (w[i] <= 0.0) continue;
        c += w[i];
        last = i;
        if (u < c) return i;
    }
    return last;
}

} // namespace

StateId sample_prompt(const TokenMdp& mdp, SplitMix64& rng) {
    const auto init = mdp.initial_states();
    std::vector<double> w;
    for (const auto& i : init) w.push_back(i.weight);
    return init[draw(w, rng)].state;
}

Trajectory sample_completion(const PolicyTable& policy, StateId prompt, SplitMix64& rng) {
    const TokenMdp& mdp = *policy.mdp;
    Trajectory traj;
    traj.prompt = prompt;
    StateId s = prompt;
    while (s != kTerminalState) {
        const auto trs = mdp.transitions(s);
        const Transition& tr = trs[draw(policy.at(s), rng)];
        traj.actions.push_back(tr.action);
        traj.step_rewards.push_back(tr.reward);
        s = tr.next;
    }
    traj.terminated = true;
    return traj;
}

Trajectory sample_trajectory(const PolicyTable& policy, SplitMix64& rng) {
    const StateId prompt = sample_prompt(*policy.mdp, rng);
    return sample_completion(policy, prompt, rng);
}

Trajectory sample_trajectory(const PolicyTable& policy, std::uint64_t seed) {
    SplitMix64 rng(seed);
    return sample_trajectory(policy, rng);
}

Trajectory sample_trajectory(const LogitsModel& model, std::uint64_t seed) {
    return sample_trajectory(PolicyTable::from_model(model), seed);
}

} // namespace shiq
