#pragma once

#include "shiq/data.hpp"
#include "shiq/losses.hpp"
#include "shiq/mdp.hpp"
#include "shiq/oracle.hpp"
#include "shiq/train.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace shiq {

enum class GridSetting { final_reward, fine_grained };
GridSetting parse_grid_setting(const std::string& name);

/// Bandit experiment: offline pairs with one draw from each behaviour distribution.
struct BanditSettings {
    std::vector<double> rewards{2.5, 2.0, 1.0};
    std::vector<double> first_behavior{0.1, 0.2, 0.7};
    std::vector<double> second_behavior{0.05, 0.05, 0.9};
    std::size_t pairs = 10'000;
    TrainConfig train = default_train();
    std::vector<LossId> losses{LossId::shiq, LossId::shiq_init, LossId::copg, LossId::dpo};

    static TrainConfig default_train();
};

/// Grid-world experiment: pairs of one optimal-policy and one uniform trajectory, linear policy.
struct GridSettings {
    GridSetting setting = GridSetting::final_reward;
    GridConfig grid;
    std::size_t pairs = 2'000;
    TrainConfig train;
    std::vector<LossId> losses;

    static GridSettings defaults(GridSetting setting);
};

/// Command-line overrides applied on top of a config file.
struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<double> beta;
    std::optional<int> epochs;
    std::optional<std::vector<LossId>> losses;
};

/**
 * INI files with [mdp], [train] and [losses] sections. Unknown keys are errors.
 *   [mdp]    rewards, gamma, rows, cols, start, goal, goal_reward, treasures, step_penalty, t_max
 *   [train]  beta, learning_rate, batch_size, epochs, optimizer, adam_b1, adam_b2, adam_eps,
 *            eval_every, seed, normalization, init, pairs, first_behavior, second_behavior
 *   [losses] names
 * Lists are comma separated; cells are "row:col"; treasures are "row:col:value" items.
 */
BanditSettings load_bandit_settings(const std::string& path, const Overrides& o = {});
GridSettings load_grid_settings(GridSetting setting, const std::string& path, const Overrides& o = {});
std::vector<LossId> parse_loss_list(const std::string& csv);

struct MethodResult {
    LossId loss;
    RunTrace trace;
    double greedy_success = 0.0; ///< goal probability of the argmax policy after training
};

struct ExperimentResult {
    MdpPtr mdp;
    LogitsModel ref;
    OracleSolution oracle;
    OfflineDataset data;
    std::vector<MethodResult> methods;
};

/// The dataset view a loss trains on: preference-filtered pairs for dpo, the generated
/// pairs as groups for dro_v and the raw pairs otherwise.
OfflineDataset dataset_for(LossId loss, const OfflineDataset& raw, const TokenMdp& mdp, std::uint64_t seed);

/// Per-method seed, independent of which other methods run.
std::uint64_t method_seed(std::uint64_t seed, LossId loss);

ExperimentResult run_bandit(const BanditSettings& s);
ExperimentResult run_gridworld(const GridSettings& s);

/// <method>_metrics.csv, <method>_curve.csv, <method>.ckpt, dataset.jsonl and summary.csv.
void write_experiment(const ExperimentResult& r, const std::string& dir);

inline constexpr std::string_view kSummaryHeader = "method,steps,final_regret,final_kl,final_reward,greedy_success";
inline constexpr std::string_view kParetoHeader = "method,step,reward,kl";

/// Merges per-method curve files (step,reward,kl,...) into method,step,reward,kl. Files with
/// only a regret column merge into method,step,regret,kl; mixing both kinds is an error.
void merge_pareto(const std::vector<std::string>& inputs, const std::string& output);

/// Entry point of the shiq_lab tool. Returns 0 on success, 1 on a failed run or check, 2 on usage errors.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

} // namespace shiq
