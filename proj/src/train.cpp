#include "shiq/train.hpp"

#include "shiq/errors.hpp"
#include "shiq/numeric.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>

namespace shiq {

Optimizer parse_optimizer(std::string_view name) {
    if (name == "adam") return Optimizer::adam;
    if (name == "sgd") return Optimizer::sgd;
    throw ValidationError("unknown optimizer '" + std::string(name) + "'");
}

void adam_step(std::span<double> params, std::span<const double> grad, AdamState& state, double lr,
               const AdamParams& hp) {
    if (grad.size() != params.size()) throw ValidationError("adam_step: gradient size mismatch");
    if (state.m.empty()) {
        state.m.assign(params.size(), 0.0);
        state.v.assign(params.size(), 0.0);
    }
    if (state.m.size() != params.size()) throw ValidationError("adam_step: state size mismatch");
    ++state.t;
    const double c1 = 1.0 - std::pow(hp.b1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(hp.b2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        state.m[i] = hp.b1 * state.m[i] + (1.0 - hp.b1) * grad[i];
        state.v[i] = hp.b2 * state.v[i] + (1.0 - hp.b2) * grad[i] * grad[i];
        const double m_hat = state.m[i] / c1;
        const double v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (std::sqrt(v_hat) + hp.eps);
    }
}

void sgd_step(std::span<double> params, std::span<const double> grad, double lr) {
    if (grad.size() != params.size()) throw ValidationError("sgd_step: gradient size mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grad[i];
}

std::size_t unit_count(LossId loss, const OfflineDataset& ds) {
    if (uses_pairs(loss)) return ds.pairs.size();
    if (uses_groups(loss)) return ds.groups.size();
    return ds.size();
}

void validate(const TrainConfig& c, const OfflineDataset& ds, double oracle_beta) {
    const std::string name = to_string(c.loss);
    if (!(c.beta > 0.0) || !std::isfinite(c.beta)) throw ValidationError("beta must be positive");
    if (c.beta != oracle_beta) throw ValidationError("beta differs from the oracle's beta");
    if (!(c.learning_rate > 0.0)) throw ValidationError("learning rate must be positive");
    if (c.epochs < 1) throw ValidationError("epochs must be at least 1");
    if (c.batch_size < 1) throw ValidationError("batch size must be at least 1");
    if (c.eval_every < 1) throw ValidationError("eval_every must be at least 1");
    if (uses_pairs(c.loss) && ds.pairs.empty()) throw ValidationError(name + " needs preference pairs");
    if (uses_groups(c.loss) && ds.groups.empty()) throw ValidationError(name + " needs prompt groups");
    if (c.loss == LossId::dpo || c.loss == LossId::dpo_mt)
        for (const auto& p : ds.pairs)
            if (p.preferred == Preference::unmarked) throw ValidationError(name + " needs marked preferences");
    const std::size_t n = unit_count(c.loss, ds);
    if (n == 0) throw ValidationError("empty dataset");
    if (c.batch_size > n)
        throw ValidationError("batch size " + std::to_string(c.batch_size) + " exceeds the " + std::to_string(n) +
                              " training units");
}

LogitsModel with_parameters(const LogitsModel& like, std::span<const double> params) {
    LogitsModel m = like;
    m.set_parameters(params);
    return m;
}

EvalRecord evaluate_checkpoint(LossId loss, const LogitsModel& model, const LogitTable& ref, const LossBatch& full,
                               const OracleSolution& oracle, const PolicyTable& ref_policy, Execution exec) {
    LossOptions opt;
    opt.execution = exec;
    const LossOutput out = evaluate_loss(loss, model, ref, full, opt);
    const PolicyTable pi = PolicyTable::from_logits(evaluate_logits(model, exec));
    const PolicyMetrics m = evaluate_policy(pi, ref_policy, oracle.beta);
    EvalRecord r;
    r.loss = out.value;
    r.grad_norm = std::sqrt(std::inner_product(out.gradient.begin(), out.gradient.end(), out.gradient.begin(), 0.0));
    r.regret = m.infinite_kl ? std::numeric_limits<double>::infinity() : oracle.optimal_value() - m.objective;
    r.kl = m.infinite_kl ? std::numeric_limits<double>::infinity() : m.kl;
    r.reward = m.reward;
    r.success = m.success;
    return r;
}

RunTrace train(const TrainConfig& c, const LogitsModel& ref, const OfflineDataset& ds, const OracleSolution& oracle) {
    validate(c, ds, oracle.beta);
    if (oracle.mdp.get() != ref.mdp_ptr().get()) throw ValidationError("oracle and reference use different MDPs");

    const MdpPtr mdp = ref.mdp_ptr();
    const auto store = make_store(ds, mdp);
    const LogitTable ref_table = evaluate_logits(ref, c.execution);
    const PolicyTable ref_policy = PolicyTable::from_logits(ref_table);

    LossBatch full;
    full.store = store;
    full.beta = c.beta;
    full.normalization = c.normalization;
    if (uses_pairs(c.loss)) full.pairs = ds.pairs;
    else if (uses_groups(c.loss)) full.groups = ds.groups;
    else {
        full.trajectories.resize(ds.size());
        std::iota(full.trajectories.begin(), full.trajectories.end(), std::size_t{0});
    }

    LogitsModel model = ref;
    if (c.init == Init::random) {
        SplitMix64 rng(derive_seed(c.seed, 0xfeed));
        for (double& p : model.parameters()) p += c.init_scale * (2.0 * rng.uniform() - 1.0);
    }

    const std::size_t n = unit_count(c.loss, ds);
    const std::size_t per_epoch = (n + c.batch_size - 1) / c.batch_size;
    RunTrace trace;
    trace.method = to_string(c.loss);
    trace.steps = per_epoch * static_cast<std::size_t>(c.epochs);

    auto record = [&](std::size_t step) {
        EvalRecord r = evaluate_checkpoint(c.loss, model, ref_table, full, oracle, ref_policy, c.execution);
        r.step = step;
        trace.records.push_back(r);
    };
    record(0);

    AdamState adam;
    LossOptions opt;
    opt.execution = c.execution;
    std::vector<std::size_t> order(n);
    LossBatch batch;
    batch.store = store;
    batch.beta = c.beta;
    batch.normalization = c.normalization;
    std::size_t step = 0;
    for (int epoch = 0; epoch < c.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        SplitMix64 rng(derive_seed(c.seed, static_cast<std::uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t b = 0; b < per_epoch; ++b) {
            const std::size_t lo = b * c.batch_size, hi = std::min(n, lo + c.batch_size);
            batch.trajectories.clear();
            batch.pairs.clear();
            batch.groups.clear();
            for (std::size_t k = lo; k < hi; ++k) {
                const std::size_t u = order[k];
                if (uses_pairs(c.loss)) batch.pairs.push_back(ds.pairs[u]);
                else if (uses_groups(c.loss)) batch.groups.push_back(ds.groups[u]);
                else batch.trajectories.push_back(u);
            }
            const LossOutput out = evaluate_loss(c.loss, model, ref_table, batch, opt);
            if (c.optimizer == Optimizer::adam) adam_step(model.parameters(), out.gradient, adam, c.learning_rate, c.adam);
            else sgd_step(model.parameters(), out.gradient, c.learning_rate);
            ++step;
            if (step % c.eval_every == 0 || step == trace.steps) record(step);
        }
    }
    trace.final_parameters.assign(model.parameters().begin(), model.parameters().end());
    return trace;
}

namespace {

std::ofstream open_csv(const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ValidationError("cannot write " + path);
    out << std::setprecision(17);
    return out;
}

} // namespace

void write_metrics_csv(const RunTrace& trace, const std::string& path) {
    auto out = open_csv(path);
    out << kMetricsHeader << '\n';
    for (const auto& r : trace.records)
        out << r.step << ',' << r.loss << ',' << r.regret << ',' << r.kl << ',' << r.grad_norm << '\n';
}

void write_curve_csv(const RunTrace& trace, const std::string& path) {
    auto out = open_csv(path);
    out << kCurveHeader << '\n';
    for (const auto& r : trace.records) out << r.step << ',' << r.reward << ',' << r.kl << ',' << r.success << '\n';
}

} // namespace shiq
