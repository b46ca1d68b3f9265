#include "shiq/cli.hpp"
#include "shiq/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace {

using namespace shiq;

struct Outcome {
    bool pass = false;
    std::string detail;
};

double final_regret(const MethodResult& m) { return m.trace.records.back().regret; }

const MethodResult* find(const ExperimentResult& r, LossId id) {
    for (const auto& m : r.methods)
        if (m.loss == id) return &m;
    return nullptr;
}

Outcome checks_outcome(const std::vector<Check>& checks) {
    Outcome o{true, {}};
    int failed = 0;
    double worst = 0.0;
    for (const auto& c : checks) {
        if (!c.passed()) {
            o.pass = false;
            if (failed++ < 3) o.detail += c.id + "=" + std::to_string(c.value) + " ";
        }
        if (!c.lower_bound && std::isfinite(c.value)) worst = std::max(worst, c.value);
    }
    std::ostringstream s;
    s << checks.size() << " checks, " << failed << " failed, worst " << worst;
    o.detail = s.str() + (o.detail.empty() ? "" : " [" + o.detail + "]");
    return o;
}

Outcome theorem_suite() {
    std::vector<Check> all;
    double residual = 0.0, tv = 0.0;
    for (const Fixture& f : standard_fixtures())
        for (auto* check : {&check_thm1, &check_thm2, &check_thm3, &check_thm4})
            for (auto& c : (*check)(f, {})) {
                if (c.id.find(".tv") != std::string::npos) tv = std::max(tv, c.value);
                else residual = std::max(residual, c.value);
                all.push_back(std::move(c));
            }
    Outcome o = checks_outcome(all);
    o.pass = o.pass && residual <= 1e-9 && tv <= 1e-11;
    std::ostringstream s;
    s << "; residual " << residual << ", tv " << tv;
    o.detail += s.str();
    return o;
}

Outcome bandit() {
    const ExperimentResult r = run_bandit(BanditSettings{});
    Outcome o{true, {}};
    std::ostringstream s;
    for (LossId id : {LossId::shiq, LossId::shiq_init, LossId::copg, LossId::dpo}) {
        const MethodResult* m = find(r, id);
        const double regret = m ? final_regret(*m) : INFINITY;
        const bool ok = id == LossId::dpo ? regret > 0.05 : regret < 1e-2;
        o.pass = o.pass && ok;
        s << to_string(id) << " regret " << regret << (ok ? "" : " (!)") << "; ";
    }
    o.detail = s.str();
    return o;
}

Outcome grid_final() {
    const GridSettings settings = GridSettings::defaults(GridSetting::final_reward);
    const ExperimentResult r = run_gridworld(settings);
    Outcome o{settings.train.epochs <= 1, {}};
    std::ostringstream s;
    s << "epochs " << settings.train.epochs << "; ";
    for (LossId id : {LossId::shiq, LossId::shiq_tk, LossId::dpo, LossId::copg}) {
        const MethodResult* m = find(r, id);
        const double success = m ? m->greedy_success : 0.0;
        o.pass = o.pass && success >= 0.99;
        s << to_string(id) << " greedy success " << success << "; ";
    }
    o.detail = s.str();
    return o;
}

/// Longest run of consecutive checkpoints in the terminal-found, treasure-missed band:
/// regret in [3, 5] while the goal is already reached with probability >= 0.9.
std::size_t plateau_length(const RunTrace& t) {
    std::size_t best = 0, run = 0;
    for (const auto& r : t.records) {
        run = r.regret >= 3.0 && r.regret <= 5.0 && r.success >= 0.9 ? run + 1 : 0;
        best = std::max(best, run);
    }
    return best;
}

Outcome grid_fine() {
    const ExperimentResult r = run_gridworld(GridSettings::defaults(GridSetting::fine_grained));
    std::ostringstream s;
    bool pass = true;
    const MethodResult* shiq = find(r, LossId::shiq);
    const double shiq_regret = shiq ? final_regret(*shiq) : INFINITY;
    const std::size_t plateau = shiq ? plateau_length(shiq->trace) : 0;
    pass = pass && shiq_regret < 0.5 && plateau >= 2;
    s << "shiq final regret " << shiq_regret << ", plateau checkpoints " << plateau << "; ";
    for (LossId id : {LossId::dpo, LossId::copg}) {
        const MethodResult* m = find(r, id);
        const double regret = m ? final_regret(*m) : 0.0;
        pass = pass && regret >= 3.0;
        s << to_string(id) << " final regret " << regret << "; ";
    }
    return {pass, s.str()};
}

Outcome init_contrast_bandit() {
    const Fixture f = zero_reward_fixtures().front();
    const InitContrast d = init_contrast(f.mdp, f.ref, f.beta);
    std::ostringstream s;
    s << "|grad| shiq " << d.shiq << ", shiq_ms " << d.shiq_ms << ", try2 " << d.try2 << ", shiq_init " << d.shiq_init;
    return {d.shiq <= 1e-12 && d.shiq_ms <= 1e-12 && d.try2 >= 1e-3 && d.shiq_init >= 1e-3, s.str()};
}

Outcome propagation_chain() {
    const Propagation p = propagation(6);
    const bool ms_last_only = p.first_step_depths_ms == std::vector<int>{6};
    std::set<int> shiq(p.first_step_depths_shiq.begin(), p.first_step_depths_shiq.end());
    const bool shiq_all = shiq == std::set<int>{1, 2, 3, 4, 5, 6};
    std::ostringstream s;
    s << "shiq_ms step-1 depths {";
    for (int d : p.first_step_depths_ms) s << ' ' << d;
    s << " }, shiq step-1 depths {";
    for (int d : p.first_step_depths_shiq) s << ' ' << d;
    s << " }, shiq_ms steps to move depth 1: " << p.steps_depth1_ms;
    return {ms_last_only && shiq_all && p.steps_depth1_ms >= 6, s.str()};
}

Outcome gradients() {
    std::vector<Check> all;
    for (const Fixture& f : standard_fixtures())
        for (auto& c : check_gradients(f, {})) all.push_back(std::move(c));
    return checks_outcome(all);
}

Outcome value_links() {
    std::vector<Check> all;
    for (const Fixture& f : value_link_fixtures()) all.push_back(check_value_link(f, {}));
    return checks_outcome(all);
}

struct Criterion {
    int id;
    const char* name;
    double budget_seconds;
    std::function<Outcome()> run;
};

} // namespace

int main(int argc, char** argv) {
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

    const std::vector<Criterion> criteria = {
        {1, "theorem residual suite", 30, theorem_suite},
        {2, "bandit reproduction", 120, bandit},
        {3, "grid-world final reward", 120, grid_final},
        {4, "grid-world fine-grained", 300, grid_fine},
        {5, "initialization contrast", 1, init_contrast_bandit},
        {6, "propagation contrast", 5, propagation_chain},
        {7, "gradient correctness", 60, gradients},
        {8, "value link", 5, value_links},
    };

    int failures = 0;
    for (const auto& c : criteria) {
        if (!only.empty() && !only.count(c.id)) continue;
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        const bool in_time = seconds <= c.budget_seconds;
        const bool pass = o.pass && in_time;
        failures += pass ? 0 : 1;
        std::printf("criterion %d %-26s %s  %.2fs/%gs  %s\n", c.id, c.name, pass ? "PASS" : "FAIL", seconds,
                    c.budget_seconds, o.detail.c_str());
        std::fflush(stdout);
    }
    return failures == 0 ? 0 : 1;
}
