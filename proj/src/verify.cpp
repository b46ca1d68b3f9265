#include "shiq/verify.hpp"

#include "shiq/data.hpp"
#include "shiq/errors.hpp"
#include "shiq/numeric.hpp"
#include "shiq/train.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>

namespace shiq {

bool Check::passed() const {
    if (std::isnan(value)) return false;
    return lower_bound ? value >= tolerance : value <= tolerance;
}

Fault parse_fault(std::string_view name) {
    if (name == "none" || name.empty()) return Fault::none;
    if (name == "oracle") return Fault::oracle;
    if (name == "gradient") return Fault::gradient;
    throw ValidationError("unknown fault '" + std::string(name) + "'");
}

namespace {

LogitsModel random_tabular(const MdpPtr& mdp, std::uint64_t seed, double scale) {
    LogitsModel m = LogitsModel::tabular(mdp);
    SplitMix64 rng(seed);
    for (double& p : m.parameters()) p = scale * (2.0 * rng.uniform() - 1.0);
    return m;
}

MdpPtr check_chain(int length, double gamma, std::optional<ActionId> eos, int vocabulary, std::uint64_t dense_seed) {
    ChainConfig c;
    c.length = length;
    c.vocabulary = vocabulary;
    c.eos = eos;
    c.gamma = gamma;
    c.dense_reward_seed = dense_seed;
    return make_token_chain(c);
}

Check upper(std::string id, double value, double tol) { return {std::move(id), value, tol, false}; }
Check lower(std::string id, double value, double tol) { return {std::move(id), value, tol, true}; }

std::string tag(std::string_view check, const Fixture& f) { return std::string(check) + "/" + f.name; }

OracleSolution solve(const Fixture& f, const VerifyOptions& opt) {
    OracleSolution sol = backward_induction(f.mdp, f.ref, f.beta);
    if (opt.fault == Fault::oracle) sol.q_star[0] += 1e-6;
    return sol;
}

double tv(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
    return 0.5 * s;
}

/// max_s TV(softmax(table(s)), pi*(s)).
double tv_gap(const LogitTable& table, const PolicyTable& target) {
    const PolicyTable pi = PolicyTable::from_logits(table);
    double worst = 0.0;
    for (std::size_t si = 0; si < table.mdp->state_count(); ++si) {
        const auto s = static_cast<StateId>(si);
        worst = std::max(worst, tv(pi.at(s), target.at(s)));
    }
    return worst;
}

/// Each admissible transition (s, slot) with its successor log-partition gap callback.
template <class Fn>
double max_over_transitions(const TokenMdp& mdp, Fn residual) {
    double worst = 0.0;
    for (std::size_t si = 0; si < mdp.state_count(); ++si) {
        const auto s = static_cast<StateId>(si);
        const auto trs = mdp.transitions(s);
        const std::size_t off = mdp.pair_offset(s);
        for (std::size_t k = 0; k < trs.size(); ++k) worst = std::max(worst, std::abs(residual(s, off + k, trs[k])));
    }
    return worst;
}

/// Trajectories used for identity checks: all of them, or a seeded reference sample above the cap.
std::vector<Trajectory> check_trajectories(const Fixture& f, const VerifyOptions& opt) {
    try {
        return enumerate_trajectories(*f.mdp, opt.trajectory_cap);
    } catch (const ResourceError&) {
        const PolicyTable ref = PolicyTable::from_model(f.ref);
        SplitMix64 rng(derive_seed(opt.seed, 4));
        std::vector<Trajectory> out;
        out.reserve(opt.trajectory_cap);
        for (std::size_t i = 0; i < opt.trajectory_cap; ++i) out.push_back(sample_trajectory(ref, rng));
        return out;
    }
}

/// Every trajectory, consecutive same-prompt pairs marked by return (ties skipped) and groups of two.
LossBatch check_batch(const Fixture& f, const VerifyOptions& opt, std::size_t cap) {
    VerifyOptions o = opt;
    o.trajectory_cap = cap;
    const auto trajs = check_trajectories(f, o);
    LossBatch b = LossBatch::all(std::make_shared<const TrajectoryStore>(f.mdp, trajs), f.beta);
    for (std::size_t i = 0; i + 1 < trajs.size(); ++i) {
        if (trajs[i].prompt != trajs[i + 1].prompt) continue;
        const double ri = f.mdp->return_of(trajs[i]), rj = f.mdp->return_of(trajs[i + 1]);
        if (ri != rj) b.pairs.push_back({i, i + 1, ri > rj ? Preference::first : Preference::second});
        if (i % 2 == 0) b.groups.push_back({i, i + 1});
    }
    return b;
}

double norm(const std::vector<double>& v) { return std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0)); }

LogitsModel fixed_point(LossId id, const OracleSolution& sol) {
    switch (id) {
    case LossId::try1: return sol.q_model();
    case LossId::try2:
    case LossId::shiq_init: return sol.g_model();
    default: return sol.l_model();
    }
}

} // namespace

std::vector<Fixture> standard_fixtures() {
    std::vector<Fixture> out;
    auto bandit = make_bandit({2.5, 2.0, 1.0});
    out.push_back({"bandit", bandit, LogitsModel::tabular(bandit), 0.5});
    auto final_grid = make_gridworld(GridConfig::final_reward());
    out.push_back({"grid_final", final_grid, LogitsModel::linear(final_grid), 0.1});
    auto fine_grid = make_gridworld(GridConfig::fine_grained());
    out.push_back({"grid_fine", fine_grid, LogitsModel::linear(fine_grid), 0.1});
    auto chain = check_chain(3, 0.9, ActionId{2}, 3, 17);
    out.push_back({"chain", chain, random_tabular(chain, 23, 1.0), 0.3});
    return out;
}

std::vector<Check> check_thm1(const Fixture& f, const VerifyOptions& opt) {
    const OracleSolution sol = solve(f, opt);
    const TokenMdp& mdp = *f.mdp;
    const double beta = f.beta;
    std::vector<double> soft(mdp.state_count(), 0.0);
    std::vector<double> buf;
    for (std::size_t si = 0; si < mdp.state_count(); ++si) {
        const auto s = static_cast<StateId>(si);
        const std::size_t off = mdp.pair_offset(s);
        buf.assign(mdp.action_count(s), 0.0);
        for (std::size_t k = 0; k < buf.size(); ++k) buf[k] = sol.ref.log_prob(off + k, s) + sol.q_star[off + k] / beta;
        soft[si] = beta * log_sum_exp(buf);
    }
    const double residual = max_over_transitions(mdp, [&](StateId, std::size_t p, const Transition& tr) {
        const double next = tr.next == kTerminalState ? 0.0 : soft[static_cast<std::size_t>(tr.next)];
        return sol.q_star[p] - tr.reward - tr.discount * next;
    });

    std::vector<double> closed(mdp.pair_count());
    for (std::size_t si = 0; si < mdp.state_count(); ++si) {
        const auto s = static_cast<StateId>(si);
        const std::size_t off = mdp.pair_offset(s);
        for (std::size_t k = 0; k < mdp.action_count(s); ++k)
            closed[off + k] = std::exp(sol.ref.log_prob(off + k, s) + sol.q_star[off + k] / beta - soft[si] / beta);
    }
    double gap = 0.0;
    for (std::size_t si = 0; si < mdp.state_count(); ++si) {
        const auto s = static_cast<StateId>(si);
        gap = std::max(gap, tv(std::span(closed).subspan(mdp.pair_offset(s), mdp.action_count(s)), sol.pi_star.at(s)));
    }
    const double value_gap =
        std::abs(evaluate_J(sol.pi_star, PolicyTable::from_logits(sol.ref), beta) - sol.optimal_value());
    return {upper(tag("thm1.residual", f), residual, 1e-10), upper(tag("thm1.tv", f), gap, 1e-12),
            upper(tag("thm1.value", f), value_gap, 1e-10)};
}

std::vector<Check> check_thm2(const Fixture& f, const VerifyOptions& opt) {
    const OracleSolution sol = solve(f, opt);
    const LogitTable g = evaluate_logits(sol.g_model());
    const double beta = f.beta;
    const double residual = max_over_transitions(*f.mdp, [&](StateId s, std::size_t p, const Transition& tr) {
        const double next = tr.next == kTerminalState ? 0.0 : g.log_partition[static_cast<std::size_t>(tr.next)];
        return beta * g.logit[p] - tr.reward - beta * sol.ref.log_prob(p, s) - tr.discount * beta * next;
    });
    return {upper(tag("thm2.residual", f), residual, 1e-10), upper(tag("thm2.tv", f), tv_gap(g, sol.pi_star), 1e-12)};
}

std::vector<Check> check_thm3(const Fixture& f, const VerifyOptions& opt) {
    const OracleSolution sol = solve(f, opt);
    const LogitTable l = evaluate_logits(sol.l_model());
    const double beta = f.beta;
    const double residual = max_over_transitions(*f.mdp, [&](StateId, std::size_t p, const Transition& tr) {
        double next = 0.0;
        if (tr.next != kTerminalState) {
            const auto n = static_cast<std::size_t>(tr.next);
            next = l.log_partition[n] - sol.ref.log_partition[n];
        }
        return beta * (l.logit[p] - sol.ref.logit[p]) - tr.reward - tr.discount * beta * next;
    });

    const LogitsModel g = sol.g_model();
    const LogitTable g_table = evaluate_logits(g);
    const PolicyTable g_policy = PolicyTable::from_logits(g_table);
    SplitMix64 rng(derive_seed(opt.seed, 3));
    double shaping = 0.0, shift = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<double> phi(f.mdp->state_count());
        for (double& x : phi) x = 10.0 * rng.uniform() - 5.0;
        const LogitTable shaped =
            evaluate_logits(shift_by_state_fn(g, [&](StateId s) { return phi[static_cast<std::size_t>(s)]; }));
        shaping = std::max(shaping, tv_gap(shaped, g_policy));
        for (std::size_t s = 0; s < phi.size(); ++s)
            shift = std::max(shift, std::abs(shaped.log_partition[s] - g_table.log_partition[s] - phi[s]));
    }
    return {upper(tag("thm3.residual", f), residual, 1e-9), upper(tag("thm3.tv", f), tv_gap(l, sol.pi_star), 1e-11),
            upper(tag("thm3.shaping", f), shaping, 1e-12), upper(tag("thm3.partition_shift", f), shift, 1e-12)};
}

std::vector<Check> check_thm4(const Fixture& f, const VerifyOptions& opt) {
    const OracleSolution sol = solve(f, opt);
    const LogitTable l = evaluate_logits(sol.l_model());
    const LogitTable& ref = sol.ref;
    const double beta = f.beta;
    const auto trajs = check_trajectories(f, opt);
    const auto count = static_cast<std::int64_t>(trajs.size());
    std::vector<double> worst(trajs.size(), 0.0);
#pragma omp parallel for schedule(dynamic, 64) num_threads(worker_count())
    for (std::int64_t i = 0; i < count; ++i) {
        const Trajectory& t = trajs[static_cast<std::size_t>(i)];
        const auto states = f.mdp->walk(t);
        double w = 0.0;
        for (std::size_t start = 0; start < states.size(); ++start) {
            const auto s0 = static_cast<std::size_t>(states[start]);
            double sum = 0.0, disc = 1.0;
            for (std::size_t k = start; k < states.size(); ++k) {
                const StateId s = states[k];
                const std::size_t p = f.mdp->pair_offset(s) + static_cast<std::size_t>(f.mdp->slot_of(s, t.actions[k]));
                sum += disc * (t.step_rewards[k] - beta * (l.log_prob(p, s) - ref.log_prob(p, s)));
                disc *= f.mdp->step_discount(s, t.actions[k]);
            }
            w = std::max(w, std::abs(beta * (l.log_partition[s0] - ref.log_partition[s0]) - sum));
        }
        worst[static_cast<std::size_t>(i)] = w;
    }
    const double residual = worst.empty() ? 0.0 : *std::max_element(worst.begin(), worst.end());
    return {upper(tag("thm4.residual", f), residual, 1e-9)};
}

Check check_value_link(const Fixture& f, const VerifyOptions& opt) {
    const OracleSolution sol = solve(f, opt);
    const LogitTable l = evaluate_logits(sol.l_model());
    double gap = 0.0;
    for (const auto& init : f.mdp->initial_states()) {
        const auto x = static_cast<std::size_t>(init.state);
        const double link = f.beta * (l.log_partition[x] - sol.ref.log_partition[x]);
        gap = std::max(gap, std::abs(sequence_value(*f.mdp, f.ref, f.beta, init.state) - link));
    }
    return upper(tag("dro.value_link", f), gap, 1e-9);
}

Check check_thm5(const Fixture& f, const VerifyOptions& opt) {
    const OracleSolution sol = backward_induction(f.mdp, f.ref, f.beta);
    OfflineDataset ds;
    ds.records = enumerate_trajectories(*f.mdp, opt.trajectory_cap);
    ds.tags.assign(ds.records.size(), "all");
    TrainConfig c;
    c.loss = LossId::shiq_tk;
    c.beta = f.beta;
    c.learning_rate = 0.05;
    c.batch_size = ds.size();
    c.epochs = 3000;
    c.eval_every = 1'000'000;
    c.seed = opt.seed;
    const RunTrace trace = train(c, f.ref, ds, sol);
    const LogitTable trained = evaluate_logits(with_parameters(f.ref, trace.final_parameters));
    return upper(tag("thm5.tv", f), tv_gap(trained, sol.pi_star), 1e-3);
}

InitContrast init_contrast(const MdpPtr& mdp, const LogitsModel& ref, double beta) {
    const auto trajs = enumerate_trajectories(*mdp, 100'000);
    const LossBatch batch = LossBatch::all(std::make_shared<const TrajectoryStore>(mdp, trajs), beta);
    InitContrast out;
    out.try2 = norm(loss_try2(ref, ref, batch).gradient);
    out.shiq_init = norm(loss_shiq_init(ref, ref, batch).gradient);
    out.shiq_ms = norm(loss_shiq_ms(ref, ref, batch).gradient);
    out.shiq = norm(loss_shiq(ref, ref, batch).gradient);
    return out;
}

std::vector<Check> check_init_contrast(const Fixture& f, const VerifyOptions&) {
    const InitContrast c = init_contrast(f.mdp, f.ref, f.beta);
    return {lower(tag("init.try2_grad", f), c.try2, 1e-3), lower(tag("init.shiq_init_grad", f), c.shiq_init, 1e-3),
            upper(tag("init.shiq_ms_grad", f), c.shiq_ms, 1e-12), upper(tag("init.shiq_grad", f), c.shiq, 1e-12)};
}

Propagation propagation(int length, double beta, double learning_rate, int max_steps, double threshold) {
    ChainConfig cfg;
    cfg.length = length;
    cfg.schedule = {{length, 0, 1.0}};
    const MdpPtr mdp = make_token_chain(cfg);
    const LogitsModel ref = LogitsModel::tabular(mdp);
    const LossBatch batch =
        LossBatch::all(std::make_shared<const TrajectoryStore>(mdp, enumerate_trajectories(*mdp, 1'000'000)), beta);
    const LogitTable ref_table = evaluate_logits(ref);

    Propagation out;
    out.length = length;
    auto depths_of = [&](const std::vector<double>& grad) {
        std::vector<int> depths;
        for (int d = 1; d <= length; ++d)
            for (StateId s : mdp->states_at_time(d)) {
                const std::size_t off = mdp->pair_offset(s);
                bool hit = false;
                for (std::size_t k = 0; k < mdp->action_count(s); ++k) hit = hit || grad[off + k] != 0.0;
                if (hit) {
                    depths.push_back(d);
                    break;
                }
            }
        return depths;
    };
    auto run = [&](LossId id, std::vector<int>& first, int& depth1, int& all) {
        LogitsModel model = ref;
        for (int step = 1; step <= max_steps && all < 0; ++step) {
            const LossOutput o = evaluate_loss(id, model, ref_table, batch);
            if (step == 1) first = depths_of(o.gradient);
            sgd_step(model.parameters(), o.gradient, learning_rate);
            bool every = true;
            for (int d = 1; d <= length; ++d) {
                double moved = 0.0;
                for (StateId s : mdp->states_at_time(d)) {
                    const std::size_t off = mdp->pair_offset(s);
                    for (std::size_t k = 0; k < mdp->action_count(s); ++k)
                        moved = std::max(moved, std::abs(model.parameters()[off + k] - ref.parameters()[off + k]));
                }
                if (moved < threshold) every = false;
                else if (d == 1 && depth1 < 0) depth1 = step;
            }
            if (every) all = step;
        }
    };
    run(LossId::shiq_ms, out.first_step_depths_ms, out.steps_depth1_ms, out.steps_all_ms);
    run(LossId::shiq, out.first_step_depths_shiq, out.steps_depth1_shiq, out.steps_all_shiq);
    return out;
}

std::vector<Check> check_propagation(int length, const VerifyOptions&) {
    const int max_steps = 200;
    const Propagation p = propagation(length, 1.0, 1.0, max_steps);
    const std::string sfx = "/chain" + std::to_string(length);
    double stray_ms = 0.0;
    for (int d : p.first_step_depths_ms) stray_ms += d != length;
    const bool ms_hits_last = std::find(p.first_step_depths_ms.begin(), p.first_step_depths_ms.end(), length) !=
                              p.first_step_depths_ms.end();
    const double missing_shiq = length - static_cast<double>(p.first_step_depths_shiq.size());
    const double steps_ms = p.steps_depth1_ms < 0 ? max_steps + 1.0 : p.steps_depth1_ms;
    return {upper("propagation.ms_stray_depths" + sfx, ms_hits_last ? stray_ms : 1.0 + stray_ms, 0.0),
            upper("propagation.shiq_missing_depths" + sfx, missing_shiq, 0.0),
            lower("propagation.ms_steps_to_depth1" + sfx, steps_ms, length)};
}

std::vector<Check> check_uniqueness(const Fixture& f, const VerifyOptions& opt) {
    const OracleSolution sol = backward_induction(f.mdp, f.ref, f.beta);
    const LossBatch batch = check_batch(f, opt, 2'000);
    std::vector<Check> out;
    SplitMix64 rng(derive_seed(opt.seed, 5));
    for (LossId id : {LossId::try1, LossId::try2, LossId::shiq_ms, LossId::shiq, LossId::shiq_init, LossId::shiq_tk,
                      LossId::copg, LossId::dro_v}) {
        LogitsModel m = fixed_point(id, sol);
        for (double& p : m.parameters()) p += rng.uniform() < 0.5 ? -1e-2 : 1e-2;
        const double scale = id == LossId::try1 ? 1.0 : f.beta * f.beta;
        out.push_back(
            lower(tag("uniqueness." + to_string(id), f), evaluate_loss(id, m, f.ref, batch).value / scale, 1e-6));
    }
    return out;
}

std::vector<Check> check_gradients(const Fixture& f, const VerifyOptions& opt) {
    const MdpPtr& mdp = f.mdp;
    const LogitsModel model = random_tabular(mdp, derive_seed(opt.seed, 6), 1.0);
    const LogitsModel ref = random_tabular(mdp, derive_seed(opt.seed, 7), 1.0);
    VerifyOptions o = opt;
    const Fixture tab{f.name, mdp, ref, f.beta};
    const LossBatch batch = check_batch(tab, o, 40);
    const LogitTable ref_table = evaluate_logits(ref);
    LossOptions serial;
    serial.execution = Execution::serial;
    std::vector<Check> out;
    for (LossId id : kAllLosses) {
        LossOutput a = evaluate_loss(id, model, ref_table, batch);
        if (opt.fault == Fault::gradient) a.gradient[0] += 1e-2;
        LogitsModel probe = model;
        auto value = [&](std::span<const double> x) {
            probe.set_parameters(x);
            return evaluate_loss(id, probe, ref_table, batch, serial).value;
        };
        const GradientReport r = compare_gradient(value, model.parameters(), a.gradient, 1e-5, 1e-4,
                                                  model.parameter_count(), opt.seed);
        out.push_back(upper(tag("gradient." + to_string(id), f), r.max_relative_error, 1e-4));
    }
    return out;
}

std::vector<Fixture> value_link_fixtures() {
    auto bandit = make_bandit({2.5, 2.0, 1.0});
    auto chain2 = check_chain(2, 1.0, std::nullopt, 2, 5);
    auto chain3 = check_chain(3, 1.0, ActionId{2}, 3, 11);
    return {{"bandit", bandit, LogitsModel::tabular(bandit), 0.5},
            {"chain2", chain2, random_tabular(chain2, 29, 1.0), 0.5},
            {"chain3", chain3, random_tabular(chain3, 31, 1.0), 0.5}};
}

std::vector<Fixture> zero_reward_fixtures() {
    auto zero = make_bandit({0.0, 0.0, 0.0});
    ChainConfig zc;
    zc.length = 3;
    zc.vocabulary = 3;
    zc.eos = 2;
    auto zero_chain = make_token_chain(zc);
    return {{"zero_bandit", zero, LogitsModel::tabular(zero), 0.5},
            {"zero_chain", zero_chain, LogitsModel::tabular(zero_chain), 0.5}};
}

std::vector<Check> run_suite(const VerifyOptions& opt, const std::function<void(const Check&)>& progress) {
    std::vector<Check> all;
    auto add = [&](std::vector<Check> cs) {
        for (auto& c : cs) {
            if (progress) progress(c);
            all.push_back(std::move(c));
        }
    };
    for (const Fixture& f : standard_fixtures()) {
        add(check_thm1(f, opt));
        add(check_thm2(f, opt));
        add(check_thm3(f, opt));
        add(check_thm4(f, opt));
        add(check_gradients(f, opt));
        add(check_uniqueness(f, opt));
    }

    const std::vector<Fixture> links = value_link_fixtures();
    for (const Fixture& f : links) add({check_value_link(f, opt)});
    for (std::size_t i = 0; i < 2; ++i) add({check_thm5(links[i], opt)});
    for (const Fixture& f : zero_reward_fixtures()) add(check_init_contrast(f, opt));
    auto single = make_bandit({0.0});
    const InitContrast d = init_contrast(single, LogitsModel::tabular(single), 0.5);
    add({upper("init.all_grads/single_action", std::max({d.try2, d.shiq_init, d.shiq_ms, d.shiq}), 1e-12)});

    add(check_propagation(6, opt));
    return all;
}

std::string report_line(const Check& c) {
    std::ostringstream s;
    s << std::setprecision(6) << c.id << ',' << c.value << ',' << (c.lower_bound ? ">=" : "") << c.tolerance << ','
      << (c.passed() ? "pass" : "fail");
    return s.str();
}

void write_report(const std::vector<Check>& checks, std::ostream& out) {
    out << kReportHeader << '\n';
    for (const auto& c : checks) out << report_line(c) << '\n';
}

} // namespace shiq
