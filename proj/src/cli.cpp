#include "shiq/cli.hpp"

#include "shiq/checkpoint.hpp"
#include "shiq/errors.hpp"
#include "shiq/parallel.hpp"
#include "shiq/verify.hpp"

#include <CLI11.hpp>
#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

namespace shiq {

namespace fs = std::filesystem;
namespace pt = boost::property_tree;

GridSetting parse_grid_setting(const std::string& name) {
    if (name == "final") return GridSetting::final_reward;
    if (name == "fine_grained") return GridSetting::fine_grained;
    throw ValidationError("unknown grid setting '" + name + "' (expected final or fine_grained)");
}

TrainConfig BanditSettings::default_train() {
    TrainConfig c;
    c.beta = 0.5;
    c.learning_rate = 1e-3;
    c.batch_size = 256;
    c.epochs = 100;
    return c;
}

GridSettings GridSettings::defaults(GridSetting setting) {
    GridSettings s;
    s.setting = setting;
    s.grid = setting == GridSetting::final_reward ? GridConfig::final_reward() : GridConfig::fine_grained();
    s.train.beta = 0.1;
    s.train.learning_rate = 1e-2;
    s.train.batch_size = 30;
    s.train.epochs = setting == GridSetting::final_reward ? 1 : 10;
    s.losses = setting == GridSetting::final_reward
                   ? std::vector<LossId>{LossId::shiq, LossId::shiq_tk, LossId::dpo, LossId::copg}
                   : std::vector<LossId>{LossId::shiq, LossId::shiq_tk, LossId::shiq_init, LossId::dpo, LossId::copg};
    return s;
}

std::vector<LossId> parse_loss_list(const std::string& csv) {
    std::vector<std::string> parts;
    boost::split(parts, csv, boost::is_any_of(","));
    std::vector<LossId> out;
    for (auto& p : parts) {
        boost::trim(p);
        if (p.empty()) continue;
        const LossId id = parse_loss_id(p);
        if (std::find(out.begin(), out.end(), id) == out.end()) out.push_back(id);
    }
    if (out.empty()) throw ValidationError("empty loss list");
    return out;
}

namespace {

std::vector<std::string> split_list(const std::string& s, const char* seps = ",") {
    std::vector<std::string> parts;
    boost::split(parts, s, boost::is_any_of(seps));
    for (auto& p : parts) boost::trim(p);
    parts.erase(std::remove(parts.begin(), parts.end(), std::string{}), parts.end());
    return parts;
}

double to_double(const std::string& s, const std::string& key) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used == s.size()) return v;
    } catch (const std::exception&) {
    }
    throw ValidationError("config key '" + key + "': expected a number, got '" + s + "'");
}

long to_integer(const std::string& s, const std::string& key) {
    try {
        std::size_t used = 0;
        const long v = std::stol(s, &used);
        if (used == s.size()) return v;
    } catch (const std::exception&) {
    }
    throw ValidationError("config key '" + key + "': expected an integer, got '" + s + "'");
}

std::vector<double> to_doubles(const std::string& s, const std::string& key) {
    std::vector<double> out;
    for (const auto& p : split_list(s)) out.push_back(to_double(p, key));
    return out;
}

Cell to_cell(const std::string& s, const std::string& key) {
    const auto parts = split_list(s, ":");
    if (parts.size() != 2) throw ValidationError("config key '" + key + "': expected row:col");
    return {static_cast<int>(to_integer(parts[0], key)), static_cast<int>(to_integer(parts[1], key))};
}

/// Section -> key -> value, rejecting keys outside `allowed`.
using Ini = std::map<std::string, std::map<std::string, std::string>>;

Ini read_ini(const std::string& path, const std::map<std::string, std::set<std::string>>& allowed) {
    Ini out;
    if (path.empty()) return out;
    pt::ptree tree;
    try {
        pt::read_ini(path, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ParseError(e.message(), e.line());
    }
    for (const auto& [section, body] : tree) {
        const auto sec = allowed.find(section);
        if (sec == allowed.end() || body.empty()) throw ValidationError("config: unknown section [" + section + "]");
        for (const auto& [key, value] : body) {
            if (!sec->second.count(key)) throw ValidationError("config: unknown key '" + key + "' in [" + section + "]");
            out[section][key] = value.data();
        }
    }
    return out;
}

const std::set<std::string> kTrainKeys = {"beta",       "learning_rate", "batch_size", "epochs",        "optimizer",
                                          "adam_b1",    "adam_b2",       "adam_eps",   "eval_every",    "seed",
                                          "normalization", "init",       "pairs",      "first_behavior", "second_behavior"};

void apply_train(const std::map<std::string, std::string>& kv, TrainConfig& c, std::size_t& pairs,
                 std::vector<double>* first, std::vector<double>* second) {
    for (const auto& [k, v] : kv) {
        if (k == "beta") c.beta = to_double(v, k);
        else if (k == "learning_rate") c.learning_rate = to_double(v, k);
        else if (k == "batch_size") c.batch_size = static_cast<std::size_t>(std::max(0L, to_integer(v, k)));
        else if (k == "epochs") c.epochs = static_cast<int>(to_integer(v, k));
        else if (k == "optimizer") c.optimizer = parse_optimizer(v);
        else if (k == "adam_b1") c.adam.b1 = to_double(v, k);
        else if (k == "adam_b2") c.adam.b2 = to_double(v, k);
        else if (k == "adam_eps") c.adam.eps = to_double(v, k);
        else if (k == "eval_every") c.eval_every = static_cast<std::size_t>(std::max(0L, to_integer(v, k)));
        else if (k == "seed") c.seed = static_cast<std::uint64_t>(to_integer(v, k));
        else if (k == "normalization") c.normalization = parse_normalization(v);
        else if (k == "init") {
            if (v == "reference") c.init = Init::reference;
            else if (v == "random") c.init = Init::random;
            else throw ValidationError("config key 'init': expected reference or random");
        } else if (k == "pairs") {
            const long n = to_integer(v, k);
            if (n < 1) throw ValidationError("config key 'pairs' must be positive");
            pairs = static_cast<std::size_t>(n);
        } else if (k == "first_behavior" || k == "second_behavior") {
            if (!first) throw ValidationError("config key '" + k + "' applies to the bandit only");
            (k == "first_behavior" ? *first : *second) = to_doubles(v, k);
        }
    }
}

void apply_overrides(const Overrides& o, TrainConfig& c, std::vector<LossId>& losses) {
    if (o.seed) c.seed = *o.seed;
    if (o.beta) c.beta = *o.beta;
    if (o.epochs) c.epochs = *o.epochs;
    if (o.losses) losses = *o.losses;
}

} // namespace

BanditSettings load_bandit_settings(const std::string& path, const Overrides& o) {
    BanditSettings s;
    const Ini ini = read_ini(path, {{"mdp", {"rewards"}}, {"train", kTrainKeys}, {"losses", {"names"}}});
    if (ini.count("mdp")) s.rewards = to_doubles(ini.at("mdp").at("rewards"), "rewards");
    if (ini.count("train")) apply_train(ini.at("train"), s.train, s.pairs, &s.first_behavior, &s.second_behavior);
    if (ini.count("losses")) s.losses = parse_loss_list(ini.at("losses").at("names"));
    apply_overrides(o, s.train, s.losses);
    return s;
}

GridSettings load_grid_settings(GridSetting setting, const std::string& path, const Overrides& o) {
    GridSettings s = GridSettings::defaults(setting);
    const Ini ini = read_ini(path, {{"mdp",
                                     {"gamma", "rows", "cols", "start", "goal", "goal_reward", "treasures", "step_penalty",
                                      "t_max"}},
                                    {"train", kTrainKeys},
                                    {"losses", {"names"}}});
    if (ini.count("mdp"))
        for (const auto& [k, v] : ini.at("mdp")) {
            GridConfig& g = s.grid;
            if (k == "gamma") g.gamma = to_double(v, k);
            else if (k == "rows") g.rows = static_cast<int>(to_integer(v, k));
            else if (k == "cols") g.cols = static_cast<int>(to_integer(v, k));
            else if (k == "start") g.start = to_cell(v, k);
            else if (k == "goal") g.goal = to_cell(v, k);
            else if (k == "goal_reward") g.goal_reward = to_double(v, k);
            else if (k == "step_penalty") g.step_penalty = to_double(v, k);
            else if (k == "t_max") g.t_max = static_cast<int>(to_integer(v, k));
            else if (k == "treasures") {
                g.treasures.clear();
                for (const auto& item : split_list(v)) {
                    const auto parts = split_list(item, ":");
                    if (parts.size() != 3) throw ValidationError("config key 'treasures': expected row:col:value items");
                    g.treasures.push_back({{static_cast<int>(to_integer(parts[0], k)), static_cast<int>(to_integer(parts[1], k))},
                                           to_double(parts[2], k)});
                }
            }
        }
    if (ini.count("train")) apply_train(ini.at("train"), s.train, s.pairs, nullptr, nullptr);
    if (ini.count("losses")) s.losses = parse_loss_list(ini.at("losses").at("names"));
    apply_overrides(o, s.train, s.losses);
    return s;
}

// ---------------------------------------------------------------------------
// Experiments

std::uint64_t method_seed(std::uint64_t seed, LossId loss) {
    return derive_seed(seed, 1000 + static_cast<std::uint64_t>(loss));
}

OfflineDataset dataset_for(LossId loss, const OfflineDataset& raw, const TokenMdp& mdp, std::uint64_t seed) {
    if (loss == LossId::dpo || loss == LossId::dpo_mt) return pair_by_preference(raw, mdp, seed);
    if (loss == LossId::dro_v) {
        if (raw.pairs.empty()) return group_by_prompt(raw, 2, seed);
        OfflineDataset ds = raw;
        ds.groups.clear();
        for (const auto& p : raw.pairs) ds.groups.push_back({std::min(p.first, p.second), std::max(p.first, p.second)});
        return ds;
    }
    return raw;
}

namespace {

ExperimentResult run_methods(MdpPtr mdp, LogitsModel ref, OfflineDataset data, const TrainConfig& base,
                             const std::vector<LossId>& losses) {
    ExperimentResult r{mdp, ref, backward_induction(mdp, ref, base.beta), std::move(data), {}};
    const PolicyTable ref_policy = PolicyTable::from_model(ref);
    std::vector<OfflineDataset> views;
    for (LossId id : losses) views.push_back(dataset_for(id, r.data, *mdp, base.seed));
    for (LossId id : losses) {
        TrainConfig c = base;
        c.loss = id;
        validate(c, views[r.methods.size()], r.oracle.beta);
        r.methods.push_back({id, {}, 0.0});
    }
    const auto count = static_cast<std::int64_t>(losses.size());
    std::vector<std::exception_ptr> errors(losses.size());
#pragma omp parallel for schedule(dynamic) num_threads(worker_count())
    for (std::int64_t i = 0; i < count; ++i) {
        const auto k = static_cast<std::size_t>(i);
        try {
            TrainConfig c = base;
            c.loss = losses[k];
            c.seed = method_seed(base.seed, losses[k]);
            MethodResult& m = r.methods[k];
            m.trace = train(c, r.ref, views[k], r.oracle);
            const LogitsModel trained = with_parameters(r.ref, m.trace.final_parameters);
            m.greedy_success = evaluate_policy(PolicyTable::greedy(trained), ref_policy, base.beta).success;
        } catch (...) {
            errors[k] = std::current_exception();
        }
    }
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);
    return r;
}

PolicyTable distribution(const MdpPtr& mdp, const std::vector<double>& probs, const char* name) {
    if (probs.size() != static_cast<std::size_t>(mdp->vocabulary_size()))
        throw ValidationError(std::string(name) + " needs one probability per arm");
    return PolicyTable::from_probabilities(mdp, probs);
}

} // namespace

ExperimentResult run_bandit(const BanditSettings& s) {
    const MdpPtr mdp = make_bandit(s.rewards);
    const LogitsModel ref = LogitsModel::tabular(mdp);
    const Behavior first{"mu1", distribution(mdp, s.first_behavior, "first_behavior"), 1.0};
    const Behavior second{"mu2", distribution(mdp, s.second_behavior, "second_behavior"), 1.0};
    OfflineDataset data = generate_paired(mdp, first, second, s.pairs, s.train.seed);
    return run_methods(mdp, ref, std::move(data), s.train, s.losses);
}

ExperimentResult run_gridworld(const GridSettings& s) {
    const MdpPtr mdp = make_gridworld(s.grid);
    const LogitsModel ref = LogitsModel::linear(mdp);
    const OracleSolution oracle = backward_induction(mdp, ref, s.train.beta);
    const Behavior good{"optimal", oracle.pi_star, 1.0};
    const Behavior bad{"uniform", PolicyTable::from_model(ref), 1.0};
    OfflineDataset data = generate_paired(mdp, good, bad, s.pairs, s.train.seed);
    return run_methods(mdp, ref, std::move(data), s.train, s.losses);
}

void write_experiment(const ExperimentResult& r, const std::string& dir) {
    fs::create_directories(dir);
    const fs::path base(dir);
    save_dataset(r.data, (base / "dataset.jsonl").string());
    std::ofstream summary(base / "summary.csv", std::ios::trunc);
    if (!summary) throw ValidationError("cannot write " + (base / "summary.csv").string());
    summary << std::setprecision(17) << kSummaryHeader << '\n';
    for (const auto& m : r.methods) {
        const std::string name = to_string(m.loss);
        write_metrics_csv(m.trace, (base / (name + "_metrics.csv")).string());
        write_curve_csv(m.trace, (base / (name + "_curve.csv")).string());
        save_checkpoint(with_parameters(r.ref, m.trace.final_parameters), (base / (name + ".ckpt")).string());
        const EvalRecord& last = m.trace.records.back();
        summary << name << ',' << m.trace.steps << ',' << last.regret << ',' << last.kl << ',' << last.reward << ','
                << m.greedy_success << '\n';
    }
}

// ---------------------------------------------------------------------------
// Pareto merge

void merge_pareto(const std::vector<std::string>& inputs, const std::string& output) {
    if (inputs.empty()) throw ValidationError("no trace files");
    struct Row {
        std::string method, step, y, kl;
    };
    std::vector<Row> rows;
    std::optional<std::string> y_name;
    for (const auto& path : inputs) {
        std::ifstream in(path);
        if (!in) throw ParseError("cannot open " + path);
        std::string line;
        if (!std::getline(in, line)) throw ParseError(path + ": empty trace", 1);
        const auto header = split_list(line);
        auto column = [&](const std::string& name) -> long {
            const auto it = std::find(header.begin(), header.end(), name);
            return it == header.end() ? -1 : static_cast<long>(it - header.begin());
        };
        const long step = column("step"), kl = column("kl");
        long y = column("reward");
        std::string this_y = "reward";
        if (y < 0) {
            y = column("regret");
            this_y = "regret";
        }
        if (kl < 0 || y < 0) throw ParseError(path + ": needs a kl column and a reward or regret column", 1);
        if (y_name && *y_name != this_y) throw ParseError(path + ": cannot merge reward and regret traces", 1);
        y_name = this_y;

        std::string method = fs::path(path).stem().string();
        for (const char* suffix : {"_curve", "_metrics", "_pareto"})
            if (boost::ends_with(method, suffix)) method.resize(method.size() - std::string_view(suffix).size());

        std::size_t n = 1;
        while (std::getline(in, line)) {
            ++n;
            if (line.empty()) continue;
            std::vector<std::string> cells;
            boost::split(cells, line, boost::is_any_of(","));
            if (cells.size() != header.size())
                throw ParseError(path + ": expected " + std::to_string(header.size()) + " fields", n);
            for (long c : {step, y, kl})
                if (c >= 0) to_double(cells[static_cast<std::size_t>(c)], header[static_cast<std::size_t>(c)]);
            rows.push_back({method, step >= 0 ? cells[static_cast<std::size_t>(step)] : std::to_string(n - 2),
                            cells[static_cast<std::size_t>(y)], cells[static_cast<std::size_t>(kl)]});
        }
    }
    std::ofstream out(output, std::ios::trunc);
    if (!out) throw ValidationError("cannot write " + output);
    out << "method,step," << *y_name << ",kl\n";
    for (const auto& r : rows) out << r.method << ',' << r.step << ',' << r.y << ',' << r.kl << '\n';
}

// ---------------------------------------------------------------------------
// Command line

namespace {

struct CommonFlags {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<double> beta;
    std::optional<int> epochs;
    std::string losses;

    Overrides overrides() const {
        Overrides o;
        o.seed = seed;
        o.beta = beta;
        o.epochs = epochs;
        if (!losses.empty()) o.losses = parse_loss_list(losses);
        return o;
    }
};

void add_common(CLI::App* cmd, CommonFlags& f, const std::string& default_out) {
    f.out = default_out;
    cmd->add_option("--config", f.config, "INI experiment config")->check(CLI::ExistingFile);
    cmd->add_option("--out", f.out, "output directory")->capture_default_str();
    cmd->add_option("--seed", f.seed, "data and training seed");
    cmd->add_option("--losses", f.losses, "comma-separated loss names");
    cmd->add_option("--beta", f.beta, "KL coefficient")->check(CLI::PositiveNumber);
    cmd->add_option("--epochs", f.epochs, "training epochs")->check(CLI::PositiveNumber);
}

void report_methods(const ExperimentResult& r, std::ostream& out) {
    out << std::setprecision(6);
    for (const auto& m : r.methods) {
        const EvalRecord& last = m.trace.records.back();
        out << std::left << std::setw(10) << to_string(m.loss) << " steps " << m.trace.steps << "  regret "
            << last.regret << "  kl " << last.kl << "  greedy_success " << m.greedy_success << '\n';
    }
}

} // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    apply_thread_env();
    CLI::App app{"KL-regularized fine-tuning laboratory", "shiq_lab"};
    app.require_subcommand(1);

    CommonFlags bandit_flags;
    CLI::App* bandit = app.add_subcommand("bandit", "three-armed bandit with offline pairs");
    add_common(bandit, bandit_flags, "out/bandit");

    CommonFlags grid_flags;
    std::string setting;
    CLI::App* grid = app.add_subcommand("gridworld", "5x5 grid-world, final or fine-grained rewards");
    grid->add_option("setting", setting, "final | fine_grained")->required()->check(CLI::IsMember({"final", "fine_grained"}));
    add_common(grid, grid_flags, "");

    std::string report_path, fault_name = "none";
    std::uint64_t verify_seed = 0;
    CLI::App* verify = app.add_subcommand("verify", "run the identity and gradient check suite");
    verify->add_option("--out", report_path, "report file");
    verify->add_option("--seed", verify_seed, "seed for sampled checks");
    verify->add_option("--inject-fault", fault_name)->group("")->check(CLI::IsMember({"none", "oracle", "gradient"}));

    std::vector<std::string> traces;
    std::string pareto_out = "pareto.csv";
    CLI::App* pareto = app.add_subcommand("pareto", "merge per-method reward/KL traces");
    pareto->add_option("traces", traces, "trace CSV files")->required()->check(CLI::ExistingFile);
    pareto->add_option("--out", pareto_out, "merged CSV")->capture_default_str();

    try {
        std::vector<std::string> args;
        for (int i = argc - 1; i > 0; --i) args.emplace_back(argv[i]);
        app.parse(args);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp& e) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "shiq_lab: " << e.what() << '\n';
        if (!app.get_subcommands().empty()) err << app.get_subcommands().front()->help();
        else err << app.help();
        return 2;
    }

    try {
        if (bandit->parsed()) {
            const BanditSettings s = load_bandit_settings(bandit_flags.config, bandit_flags.overrides());
            const ExperimentResult r = run_bandit(s);
            write_experiment(r, bandit_flags.out);
            report_methods(r, out);
            return 0;
        }
        if (grid->parsed()) {
            const GridSetting gs = parse_grid_setting(setting);
            const GridSettings s = load_grid_settings(gs, grid_flags.config, grid_flags.overrides());
            const ExperimentResult r = run_gridworld(s);
            const std::string dir = grid_flags.out.empty() ? "out/gridworld_" + setting : grid_flags.out;
            write_experiment(r, dir);
            std::vector<std::string> curves;
            for (const auto& m : r.methods) curves.push_back((fs::path(dir) / (to_string(m.loss) + "_curve.csv")).string());
            merge_pareto(curves, (fs::path(dir) / "pareto.csv").string());
            report_methods(r, out);
            return 0;
        }
        if (verify->parsed()) {
            VerifyOptions opt;
            opt.fault = parse_fault(fault_name);
            opt.seed = verify_seed;
            std::ofstream file;
            if (!report_path.empty()) {
                file.open(report_path, std::ios::trunc);
                if (!file) throw ValidationError("cannot write " + report_path);
                file << kReportHeader << '\n';
            }
            out << kReportHeader << '\n';
            bool ok = true;
            run_suite(opt, [&](const Check& c) {
                const std::string line = report_line(c);
                out << line << '\n' << std::flush;
                if (file.is_open()) file << line << '\n';
                ok = ok && c.passed();
            });
            return ok ? 0 : 1;
        }
        if (pareto->parsed()) {
            merge_pareto(traces, pareto_out);
            return 0;
        }
    } catch (const std::exception& e) {
        err << "shiq_lab: " << e.what() << '\n';
        return 1;
    }
    return 2;
}

} // namespace shiq
