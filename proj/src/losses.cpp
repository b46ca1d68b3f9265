#include "shiq/losses.hpp"

#include "shiq/errors.hpp"
#include "shiq/numeric.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>

namespace shiq {

namespace {

constexpr std::pair<LossId, const char*> kLossNames[] = {
    {LossId::try1, "try1"},         {LossId::try2, "try2"},       {LossId::shiq_ms, "shiq_ms"},
    {LossId::shiq, "shiq"},         {LossId::shiq_init, "shiq_init"}, {LossId::shiq_tk, "shiq_tk"},
    {LossId::dpo, "dpo"},           {LossId::dpo_mt, "dpo_mt"},   {LossId::copg, "copg"},
    {LossId::copg_mt, "copg_mt"},   {LossId::dro_v, "dro_v"},
};

} // namespace

LossId parse_loss_id(std::string_view name) {
    for (const auto& [id, n] : kLossNames)
        if (name == n) return id;
    throw ValidationError("unknown loss '" + std::string(name) + "'");
}

std::string to_string(LossId id) {
    for (const auto& [i, n] : kLossNames)
        if (i == id) return n;
    return "?";
}

bool uses_pairs(LossId id) {
    return id == LossId::dpo || id == LossId::dpo_mt || id == LossId::copg || id == LossId::copg_mt;
}

bool uses_groups(LossId id) { return id == LossId::dro_v; }

Normalization parse_normalization(std::string_view name) {
    if (name == "token" || name == "token_count") return Normalization::token_count;
    if (name == "sequence" || name == "sequence_count") return Normalization::sequence_count;
    throw ValidationError("unknown normalization '" + std::string(name) + "'");
}

std::string to_string(Normalization n) { return n == Normalization::token_count ? "token_count" : "sequence_count"; }

// ---------------------------------------------------------------------------
// TrajectoryStore

TrajectoryStore::TrajectoryStore(MdpPtr mdp, std::vector<Trajectory> trajectories)
    : mdp_(std::move(mdp)), raw_(std::move(trajectories)) {
    if (!mdp_) throw ValidationError("TrajectoryStore: null MDP");
    resolved_.reserve(raw_.size());
    for (const Trajectory& t : raw_) {
        ResolvedTrajectory r;
        r.prompt = t.prompt;
        r.states = mdp_->walk(t);
        r.rewards = t.step_rewards;
        r.terminated = t.terminated;
        for (std::size_t k = 0; k < t.actions.size(); ++k) {
            const StateId s = r.states[k];
            const int slot = mdp_->slot_of(s, t.actions[k]);
            r.pairs.push_back(mdp_->pair_offset(s) + static_cast<std::size_t>(slot));
            r.discounts.push_back(mdp_->transitions(s)[static_cast<std::size_t>(slot)].discount);
        }
        resolved_.push_back(std::move(r));
    }
}

LossBatch LossBatch::all(std::shared_ptr<const TrajectoryStore> store, double beta) {
    LossBatch b;
    b.trajectories.resize(store->size());
    std::iota(b.trajectories.begin(), b.trajectories.end(), std::size_t{0});
    b.store = std::move(store);
    b.beta = beta;
    return b;
}

// ---------------------------------------------------------------------------
// Kernels

namespace {

using Contribution = std::pair<std::size_t, double>;

struct UnitResult {
    double value = 0.0;
    std::vector<Contribution> grad;
    std::vector<double> residuals;
};

class Kernel {
public:
    Kernel(LossId id, const LogitTable& model, const LogitTable& ref, const LossBatch& batch)
        : id_(id), m_(model), r_(ref), mdp_(*model.mdp), store_(*batch.store), beta_(batch.beta) {}

    UnitResult trajectory(std::size_t index) const {
        const ResolvedTrajectory& t = store_.resolved(index);
        UnitResult u;
        switch (id_) {
        case LossId::try1: one_step_q(t, u); break;
        case LossId::try2:
        case LossId::shiq_ms: one_step_logit(t, u); break;
        default: multi_step(t, u); break;
        }
        return u;
    }

    UnitResult pair(const PreferencePair& p) const {
        const ResolvedTrajectory& a = store_.resolved(p.first);
        const ResolvedTrajectory& b = store_.resolved(p.second);
        UnitResult u;
        if (id_ == LossId::dpo || id_ == LossId::dpo_mt) {
            const bool first_wins = p.preferred == Preference::first;
            const ResolvedTrajectory& win = first_wins ? a : b;
            const ResolvedTrajectory& lose = first_wins ? b : a;
            const double h = beta_ * (log_ratio_sum(win) - log_ratio_sum(lose));
            u.value = softplus(-h);
            u.residuals.push_back(h);
            const double dh = -sigmoid(-h);
            add_uniform_lp(win, dh * beta_, u);
            add_uniform_lp(lose, -dh * beta_, u);
        } else {
            const bool discounted = id_ == LossId::copg;
            const double d = advantage(a, discounted) - advantage(b, discounted);
            u.value = d * d;
            u.residuals.push_back(d);
            add_advantage_grad(a, discounted, 2.0 * d, u);
            add_advantage_grad(b, discounted, -2.0 * d, u);
        }
        return u;
    }

    UnitResult group(const std::vector<std::size_t>& members) const {
        UnitResult u;
        const auto k = static_cast<double>(members.size());
        std::vector<double> d(members.size());
        double mean = 0.0;
        for (std::size_t i = 0; i < members.size(); ++i) {
            d[i] = advantage(store_.resolved(members[i]), true);
            mean += d[i];
        }
        mean /= k;
        for (std::size_t i = 0; i < members.size(); ++i) {
            const double dev = d[i] - mean;
            u.value += 0.5 * dev * dev / (k - 1.0);
            u.residuals.push_back(dev);
            add_advantage_grad(store_.resolved(members[i]), true, dev / (k - 1.0), u);
        }
        return u;
    }

private:
    double lp(std::size_t pair, StateId s) const { return m_.log_prob(pair, s); }
    double lr(std::size_t pair, StateId s) const { return r_.log_prob(pair, s); }
    double v(StateId s) const { return m_.log_partition[static_cast<std::size_t>(s)]; }
    double dv(StateId s) const { return v(s) - r_.log_partition[static_cast<std::size_t>(s)]; }

    /// coef * d v(s) / d logit(s, .)
    void add_v_grad(StateId s, double coef, UnitResult& u) const {
        const std::size_t off = mdp_.pair_offset(s);
        const std::size_t n = mdp_.action_count(s);
        for (std::size_t a = 0; a < n; ++a) u.grad.emplace_back(off + a, coef * std::exp(m_.logit[off + a] - v(s)));
    }

    /// coef * d log pi(pair | s) / d logit(s, .)
    void add_lp_grad(StateId s, std::size_t pair, double coef, UnitResult& u) const {
        add_v_grad(s, -coef, u);
        u.grad.emplace_back(pair, coef);
    }

    void one_step_q(const ResolvedTrajectory& t, UnitResult& u) const {
        std::vector<double> w;
        for (std::size_t k = 0; k < t.length(); ++k) {
            double res = t.rewards[k] - m_.logit[t.pairs[k]];
            StateId next = kTerminalState;
            if (t.discounts[k] != 0.0) {
                next = t.states[k + 1];
                const std::size_t off = mdp_.pair_offset(next);
                const std::size_t n = mdp_.action_count(next);
                w.resize(n);
                for (std::size_t a = 0; a < n; ++a) w[a] = m_.logit[off + a] / beta_ + lr(off + a, next);
                const double lse = log_sum_exp(w);
                for (double& x : w) x = std::exp(x - lse);
                res += t.discounts[k] * beta_ * lse;
            }
            u.value += res * res;
            u.residuals.push_back(res);
            const double c = 2.0 * res;
            u.grad.emplace_back(t.pairs[k], -c);
            if (next != kTerminalState) {
                const std::size_t off = mdp_.pair_offset(next);
                for (std::size_t a = 0; a < w.size(); ++a) u.grad.emplace_back(off + a, c * t.discounts[k] * w[a]);
            }
        }
    }

    void one_step_logit(const ResolvedTrajectory& t, UnitResult& u) const {
        const bool shaped = id_ == LossId::shiq_ms;
        for (std::size_t k = 0; k < t.length(); ++k) {
            const StateId s = t.states[k];
            const std::size_t p = t.pairs[k];
            double res = t.rewards[k];
            if (shaped)
                res -= beta_ * (m_.logit[p] - r_.logit[p]);
            else
                res += beta_ * lr(p, s) - beta_ * m_.logit[p];
            const bool cont = t.discounts[k] != 0.0;
            if (cont) res += t.discounts[k] * beta_ * (shaped ? dv(t.states[k + 1]) : v(t.states[k + 1]));
            u.value += res * res;
            u.residuals.push_back(res);
            const double c = 2.0 * res;
            u.grad.emplace_back(p, -beta_ * c);
            if (cont) add_v_grad(t.states[k + 1], c * t.discounts[k] * beta_, u);
        }
    }

    void multi_step(const ResolvedTrajectory& t, UnitResult& u) const {
        const std::size_t n = t.length();
        std::vector<double> suffix(n + 1, 0.0);
        for (std::size_t k = n; k-- > 0;) {
            const double c = t.rewards[k] - beta_ * (lp(t.pairs[k], t.states[k]) - lr(t.pairs[k], t.states[k]));
            suffix[k] = c + t.discounts[k] * suffix[k + 1];
        }
        const std::size_t starts = id_ == LossId::shiq_tk ? 1 : n;
        std::vector<double> coef(n, 0.0); // 2 * residual at each start index
        for (std::size_t k = 0; k < starts; ++k) {
            const StateId s = t.states[k];
            const double base = id_ == LossId::shiq_init ? v(s) : dv(s);
            const double res = suffix[k] - beta_ * base;
            u.value += res * res;
            u.residuals.push_back(res);
            coef[k] = 2.0 * res;
        }
        double carry = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
            carry = coef[k] + (k ? t.discounts[k - 1] * carry : 0.0);
            const StateId s = t.states[k];
            if (carry != 0.0) add_lp_grad(s, t.pairs[k], -beta_ * carry, u);
            if (coef[k] != 0.0) add_v_grad(s, -beta_ * coef[k], u);
        }
    }

    double log_ratio_sum(const ResolvedTrajectory& t) const {
        double acc = 0.0;
        for (std::size_t k = 0; k < t.length(); ++k) acc += lp(t.pairs[k], t.states[k]) - lr(t.pairs[k], t.states[k]);
        return acc;
    }

    void add_uniform_lp(const ResolvedTrajectory& t, double coef, UnitResult& u) const {
        for (std::size_t k = 0; k < t.length(); ++k) add_lp_grad(t.states[k], t.pairs[k], coef, u);
    }

    /// Regularized return sum_k w_k (r_k - beta log-ratio_k), with w_k the discount product or 1.
    double advantage(const ResolvedTrajectory& t, bool discounted) const {
        double acc = 0.0, w = 1.0;
        for (std::size_t k = 0; k < t.length(); ++k) {
            acc += w * (t.rewards[k] - beta_ * (lp(t.pairs[k], t.states[k]) - lr(t.pairs[k], t.states[k])));
            if (discounted) w *= t.discounts[k];
        }
        return acc;
    }

    void add_advantage_grad(const ResolvedTrajectory& t, bool discounted, double coef, UnitResult& u) const {
        double w = 1.0;
        for (std::size_t k = 0; k < t.length(); ++k) {
            if (w != 0.0) add_lp_grad(t.states[k], t.pairs[k], -beta_ * coef * w, u);
            if (discounted) w *= t.discounts[k];
        }
    }

    LossId id_;
    const LogitTable& m_;
    const LogitTable& r_;
    const TokenMdp& mdp_;
    const TrajectoryStore& store_;
    double beta_;
};

void validate(LossId id, const LogitsModel& model, const LogitTable& ref, const LossBatch& batch) {
    if (!batch.store) throw ValidationError("loss batch has no trajectory store");
    if (&batch.store->mdp() != &model.mdp() || ref.mdp.get() != &model.mdp())
        throw ValidationError("loss batch, model and reference must share one MDP");
    if (!(batch.beta > 0.0) || !std::isfinite(batch.beta)) throw ValidationError("beta must be a positive finite number");
    const TrajectoryStore& store = *batch.store;
    auto check_index = [&](std::size_t i) {
        if (i >= store.size()) throw ValidationError("trajectory index " + std::to_string(i) + " out of range");
        if (!store.resolved(i).terminated) throw ValidationError("trajectory " + std::to_string(i) + " is not terminated");
    };
    if (uses_pairs(id)) {
        for (const PreferencePair& p : batch.pairs) {
            check_index(p.first);
            check_index(p.second);
            if (store.resolved(p.first).prompt != store.resolved(p.second).prompt)
                throw ValidationError("pair (" + std::to_string(p.first) + ", " + std::to_string(p.second) + ") mixes prompts");
            if ((id == LossId::dpo || id == LossId::dpo_mt) && p.preferred == Preference::unmarked)
                throw ValidationError("pair (" + std::to_string(p.first) + ", " + std::to_string(p.second) +
                                      ") has no preference label");
        }
    } else if (uses_groups(id)) {
        for (const auto& g : batch.groups) {
            if (g.size() < 2) throw ValidationError("dro_v groups need at least 2 trajectories");
            for (std::size_t i : g) {
                check_index(i);
                if (store.resolved(i).prompt != store.resolved(g.front()).prompt)
                    throw ValidationError("dro_v group mixes prompts");
            }
        }
    } else {
        for (std::size_t i : batch.trajectories) check_index(i);
    }
}

} // namespace

LossOutput evaluate_loss(LossId id, const LogitsModel& model, const LogitTable& ref, const LossBatch& batch,
                         const LossOptions& options) {
    validate(id, model, ref, batch);
    const LogitTable table = evaluate_logits(model, options.execution);
    const Kernel kernel(id, table, ref, batch);

    std::size_t units = 0;
    double denom = 0.0;
    if (uses_pairs(id)) {
        units = batch.pairs.size();
        denom = static_cast<double>(units);
    } else if (uses_groups(id)) {
        units = batch.groups.size();
        denom = static_cast<double>(units);
    } else {
        units = batch.trajectories.size();
        if (batch.normalization == Normalization::sequence_count || id == LossId::shiq_tk) {
            denom = static_cast<double>(units);
        } else {
            for (std::size_t i : batch.trajectories) denom += static_cast<double>(batch.store->resolved(i).length());
        }
    }

    auto run = [&](std::size_t u) {
        if (uses_pairs(id)) return kernel.pair(batch.pairs[u]);
        if (uses_groups(id)) return kernel.group(batch.groups[u]);
        return kernel.trajectory(batch.trajectories[u]);
    };

    const TokenMdp& mdp = model.mdp();
    std::vector<double> pair_grad(mdp.pair_count(), 0.0);
    LossOutput out;
    double total = 0.0;
    auto reduce = [&](UnitResult& r) {
        total += r.value;
        for (const auto& [i, g] : r.grad) pair_grad[i] += g;
        if (options.keep_residuals) out.residuals.insert(out.residuals.end(), r.residuals.begin(), r.residuals.end());
    };

    if (options.execution == Execution::parallel && units > 1) {
        std::vector<UnitResult> results(units);
        const auto n = static_cast<std::int64_t>(units);
#pragma omp parallel for schedule(dynamic, 16) num_threads(worker_count())
        for (std::int64_t u = 0; u < n; ++u) results[static_cast<std::size_t>(u)] = run(static_cast<std::size_t>(u));
        for (UnitResult& r : results) reduce(r);
    } else {
        for (std::size_t u = 0; u < units; ++u) {
            UnitResult r = run(u);
            reduce(r);
        }
    }

    const double scale = denom > 0.0 ? 1.0 / denom : 0.0;
    out.value = total * scale;
    for (double& g : pair_grad) g *= scale;
    out.gradient.assign(model.parameter_count(), 0.0);
    model.accumulate_gradient(pair_grad, out.gradient);
    if (options.pair_gradient) *options.pair_gradient = std::move(pair_grad);
    return out;
}

LossOutput evaluate_loss(LossId id, const LogitsModel& model, const LogitsModel& ref, const LossBatch& batch,
                         const LossOptions& options) {
    if (&ref.mdp() != &model.mdp()) throw ValidationError("model and reference must share one MDP");
    return evaluate_loss(id, model, evaluate_logits(ref, options.execution), batch, options);
}

#define SHIQ_NAMED_LOSS(name)                                                                          \
    LossOutput loss_##name(const LogitsModel& m, const LogitsModel& ref, const LossBatch& batch) {     \
        return evaluate_loss(LossId::name, m, ref, batch);                                             \
    }
SHIQ_NAMED_LOSS(try1)
SHIQ_NAMED_LOSS(try2)
SHIQ_NAMED_LOSS(shiq_ms)
SHIQ_NAMED_LOSS(shiq)
SHIQ_NAMED_LOSS(shiq_init)
SHIQ_NAMED_LOSS(shiq_tk)
SHIQ_NAMED_LOSS(dpo)
SHIQ_NAMED_LOSS(dpo_mt)
SHIQ_NAMED_LOSS(copg)
SHIQ_NAMED_LOSS(copg_mt)
SHIQ_NAMED_LOSS(dro_v)
#undef SHIQ_NAMED_LOSS

// ---------------------------------------------------------------------------
// Naive reference

namespace reference {

namespace {

struct Step {
    StateId state;
    ActionId action;
    double reward;
    double discount;
    StateId next;
};

std::vector<Step> steps_of(const TokenMdp& mdp, const Trajectory& t) {
    std::vector<Step> out;
    StateId s = t.prompt;
    for (std::size_t k = 0; k < t.actions.size(); ++k) {
        const Transition& tr = mdp.transition_info(s, t.actions[k]);
        out.push_back({s, t.actions[k], t.step_rewards[k], tr.discount, tr.next});
        s = tr.next;
    }
    return out;
}

double logit_of(const LogitsModel& m, StateId s, ActionId a) {
    return m.logit(s, static_cast<std::size_t>(m.mdp().slot_of(s, a)));
}

double ratio(const LogitsModel& m, const LogitsModel& ref, const Step& st) {
    return log_prob(m, st.state, st.action) - log_prob(ref, st.state, st.action);
}

/// sum_{k >= t} (prod_{j=t}^{k-1} gamma_j) (r_k - beta log-ratio_k), evaluated term by term.
double regularized_suffix(const LogitsModel& m, const LogitsModel& ref, const std::vector<Step>& steps, std::size_t t,
                          double beta) {
    double acc = 0.0;
    for (std::size_t k = t; k < steps.size(); ++k) {
        double w = 1.0;
        for (std::size_t j = t; j < k; ++j) w *= steps[j].discount;
        acc += w * (steps[k].reward - beta * ratio(m, ref, steps[k]));
    }
    return acc;
}

double undiscounted(const LogitsModel& m, const LogitsModel& ref, const std::vector<Step>& steps, double beta) {
    double acc = 0.0;
    for (const Step& st : steps) acc += st.reward - beta * ratio(m, ref, st);
    return acc;
}

double single(LossId id, const LogitsModel& m, const LogitsModel& ref, const std::vector<Step>& steps, double beta,
              std::size_t& terms) {
    double total = 0.0;
    for (std::size_t t = 0; t < steps.size(); ++t) {
        const Step& st = steps[t];
        double res = 0.0;
        switch (id) {
        case LossId::try1: {
            double w = 0.0;
            if (st.next != kTerminalState) {
                std::vector<double> x;
                for (const Transition& tr : m.mdp().transitions(st.next))
                    x.push_back(logit_of(m, st.next, tr.action) / beta + log_prob(ref, st.next, tr.action));
                w = beta * log_sum_exp(x);
            }
            res = st.reward + st.discount * w - logit_of(m, st.state, st.action);
            break;
        }
        case LossId::try2:
            res = st.reward + beta * log_prob(ref, st.state, st.action) - beta * logit_of(m, st.state, st.action) +
                  (st.next != kTerminalState ? st.discount * beta * log_partition(m, st.next) : 0.0);
            break;
        case LossId::shiq_ms:
            res = st.reward - beta * (logit_of(m, st.state, st.action) - logit_of(ref, st.state, st.action)) +
                  (st.next != kTerminalState
                       ? st.discount * beta * (log_partition(m, st.next) - log_partition(ref, st.next))
                       : 0.0);
            break;
        case LossId::shiq:
        case LossId::shiq_tk:
            res = regularized_suffix(m, ref, steps, t, beta) -
                  beta * (log_partition(m, st.state) - log_partition(ref, st.state));
            break;
        case LossId::shiq_init:
            res = regularized_suffix(m, ref, steps, t, beta) - beta * log_partition(m, st.state);
            break;
        default: break;
        }
        total += res * res;
        ++terms;
        if (id == LossId::shiq_tk) break;
    }
    return total;
}

} // namespace

double loss_value(LossId id, const LogitsModel& model, const LogitsModel& ref, const LossBatch& batch) {
    const TokenMdp& mdp = model.mdp();
    const double beta = batch.beta;
    auto steps = [&](std::size_t i) { return steps_of(mdp, batch.store->trajectory(i)); };

    if (uses_pairs(id)) {
        if (batch.pairs.empty()) return 0.0;
        double total = 0.0;
        for (const PreferencePair& p : batch.pairs) {
            const auto a = steps(p.first), b = steps(p.second);
            if (id == LossId::dpo || id == LossId::dpo_mt) {
                double la = 0.0, lb = 0.0;
                for (const Step& st : a) la += ratio(model, ref, st);
                for (const Step& st : b) lb += ratio(model, ref, st);
                const double h = p.preferred == Preference::first ? beta * (la - lb) : beta * (lb - la);
                total += -std::log(sigmoid(h));
            } else {
                const double d = id == LossId::copg
                                     ? regularized_suffix(model, ref, a, 0, beta) - regularized_suffix(model, ref, b, 0, beta)
                                     : undiscounted(model, ref, a, beta) - undiscounted(model, ref, b, beta);
                total += d * d;
            }
        }
        return total / static_cast<double>(batch.pairs.size());
    }
    if (uses_groups(id)) {
        if (batch.groups.empty()) return 0.0;
        double total = 0.0;
        for (const auto& g : batch.groups) {
            std::vector<double> d;
            for (std::size_t i : g) d.push_back(regularized_suffix(model, ref, steps(i), 0, beta));
            const double k = static_cast<double>(d.size());
            const double mean = std::accumulate(d.begin(), d.end(), 0.0) / k;
            double var = 0.0;
            for (double x : d) var += (x - mean) * (x - mean);
            total += 0.5 * var / (k - 1.0);
        }
        return total / static_cast<double>(batch.groups.size());
    }
    if (batch.trajectories.empty()) return 0.0;
    double total = 0.0;
    std::size_t terms = 0;
    for (std::size_t i : batch.trajectories) total += single(id, model, ref, steps(i), beta, terms);
    const bool per_sequence = batch.normalization == Normalization::sequence_count || id == LossId::shiq_tk;
    return total / static_cast<double>(per_sequence ? batch.trajectories.size() : terms);
}

} // namespace reference

// ---------------------------------------------------------------------------
// Gradient checks

GradientReport compare_gradient(const std::function<double(std::span<const double>)>& value, std::span<const double> x,
                                std::span<const double> analytic, double step, double tolerance, std::size_t subset,
                                std::uint64_t seed) {
    if (!(step >= 1e-7 && step <= 1e-3)) throw ValidationError("finite-difference step must lie in [1e-7, 1e-3]");
    if (analytic.size() != x.size()) throw ValidationError("gradient length does not match parameter count");
    std::vector<std::size_t> coords(x.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > subset) {
        SplitMix64 rng(seed);
        std::shuffle(coords.begin(), coords.end(), rng);
        coords.resize(subset);
        std::sort(coords.begin(), coords.end());
    }
    GradientReport rep;
    rep.tolerance = tolerance;
    std::vector<double> probe(x.begin(), x.end());
    for (std::size_t i : coords) {
        probe[i] = x[i] + step;
        const double up = value(probe);
        probe[i] = x[i] - step;
        const double down = value(probe);
        probe[i] = x[i];
        const double numeric = (up - down) / (2.0 * step);
        const double err = std::abs(analytic[i] - numeric);
        rep.max_absolute_error = std::max(rep.max_absolute_error, err);
        rep.max_relative_error =
            std::max(rep.max_relative_error, err / std::max({std::abs(analytic[i]), std::abs(numeric), 1e-4}));
    }
    rep.checked = coords.size();
    rep.passed = rep.max_relative_error <= tolerance;
    return rep;
}

GradientReport gradient_check(LossId id, const LogitsModel& model, const LogitsModel& ref, const LossBatch& batch,
                              double step, double tolerance, std::uint64_t seed) {
    const LogitTable ref_table = evaluate_logits(ref);
    const LossOutput at = evaluate_loss(id, model, ref_table, batch);
    LogitsModel probe = model;
    auto value = [&](std::span<const double> x) {
        probe.set_parameters(x);
        return evaluate_loss(id, probe, ref_table, batch).value;
    };
    const std::size_t subset = model.kind() == ModelKind::tabular ? model.parameter_count() : kGradientSubset;
    return compare_gradient(value, model.parameters(), at.gradient, step, tolerance, subset, seed);
}

} // namespace shiq
