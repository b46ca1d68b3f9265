#pragma once

#include "shiq/mdp.hpp"
#include "shiq/parallel.hpp"
#include "shiq/policy.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace shiq {

enum class LossId { try1, try2, shiq_ms, shiq, shiq_init, shiq_tk, dpo, dpo_mt, copg, copg_mt, dro_v };

inline constexpr LossId kAllLosses[] = {LossId::try1,    LossId::try2,   LossId::shiq_ms, LossId::shiq,
                                        LossId::shiq_init, LossId::shiq_tk, LossId::dpo,     LossId::dpo_mt,
                                        LossId::copg,    LossId::copg_mt, LossId::dro_v};

/// Throws ValidationError on an unknown name.
LossId parse_loss_id(std::string_view name);
std::string to_string(LossId id);

bool uses_pairs(LossId id);
bool uses_groups(LossId id);

enum class Normalization { token_count, sequence_count };
Normalization parse_normalization(std::string_view name);
std::string to_string(Normalization n);

/// A trajectory replayed through the MDP: visited states, pair indices and discounts per step.
struct ResolvedTrajectory {
    StateId prompt = 0;
    std::vector<StateId> states;
    std::vector<std::size_t> pairs;
    std::vector<double> rewards;
    std::vector<double> discounts;
    bool terminated = false;

    std::size_t length() const noexcept { return states.size(); }
};

/// Immutable set of trajectories validated against one MDP.
class TrajectoryStore {
public:
    TrajectoryStore(MdpPtr mdp, std::vector<Trajectory> trajectories);

    const TokenMdp& mdp() const noexcept { return *mdp_; }
    const MdpPtr& mdp_ptr() const noexcept { return mdp_; }
    std::size_t size() const noexcept { return raw_.size(); }
    const Trajectory& trajectory(std::size_t i) const { return raw_.at(i); }
    const ResolvedTrajectory& resolved(std::size_t i) const { return resolved_.at(i); }

private:
    MdpPtr mdp_;
    std::vector<Trajectory> raw_;
    std::vector<ResolvedTrajectory> resolved_;
};

enum class Preference : std::uint8_t { unmarked, first, second };

struct PreferencePair {
    std::size_t first = 0;
    std::size_t second = 0;
    Preference preferred = Preference::unmarked;
};

/**
 * Indices into a trajectory store. Single-trajectory losses read `trajectories`,
 * pairwise losses read `pairs`, dro_v reads `groups`. Discounts come from the MDP.
 */
struct LossBatch {
    std::shared_ptr<const TrajectoryStore> store;
    std::vector<std::size_t> trajectories;
    std::vector<PreferencePair> pairs;
    std::vector<std::vector<std::size_t>> groups;
    double beta = 1.0;
    Normalization normalization = Normalization::token_count;

    /// Batch over every trajectory of `store`.
    static LossBatch all(std::shared_ptr<const TrajectoryStore> store, double beta);
};

struct LossOutput {
    double value = 0.0;
    std::vector<double> gradient;  ///< aligned with the model's parameters
    std::vector<double> residuals; ///< per term, filled on request
};

struct LossOptions {
    Execution execution = Execution::parallel;
    bool keep_residuals = false;
    /// Also return dL/dlogit per pair (tabular layout) in `pair_gradient`.
    std::vector<double>* pair_gradient = nullptr;
};

LossOutput evaluate_loss(LossId id, const LogitsModel& model, const LogitTable& ref, const LossBatch& batch,
                         const LossOptions& options = {});
LossOutput evaluate_loss(LossId id, const LogitsModel& model, const LogitsModel& ref, const LossBatch& batch,
                         const LossOptions& options = {});

LossOutput loss_try1(const LogitsModel& q, const LogitsModel& ref, const LossBatch& batch);
LossOutput loss_try2(const LogitsModel& g, const LogitsModel& ref, const LossBatch& batch);
LossOutput loss_shiq_ms(const LogitsModel& l, const LogitsModel& ref, const LossBatch& batch);
LossOutput loss_shiq(const LogitsModel& l, const LogitsModel& ref, const LossBatch& batch);
LossOutput loss_shiq_init(const LogitsModel& l, const LogitsModel& ref, const LossBatch& batch);
LossOutput loss_shiq_tk(const LogitsModel& l, const LogitsModel& ref, const LossBatch& batch);
LossOutput loss_dpo(const LogitsModel& policy, const LogitsModel& ref, const LossBatch& batch);
LossOutput loss_dpo_mt(const LogitsModel& policy, const LogitsModel& ref, const LossBatch& batch);
LossOutput loss_copg(const LogitsModel& policy, const LogitsModel& ref, const LossBatch& batch);
LossOutput loss_copg_mt(const LogitsModel& policy, const LogitsModel& ref, const LossBatch& batch);
LossOutput loss_dro_v(const LogitsModel& policy, const LogitsModel& ref, const LossBatch& batch);

/// Direct O(length^2) evaluation from log_prob/log_partition, without scans or shared tables.
namespace reference {
double loss_value(LossId id, const LogitsModel& model, const LogitsModel& ref, const LossBatch& batch);
}

struct GradientReport {
    double max_relative_error = 0.0;
    double max_absolute_error = 0.0;
    std::size_t checked = 0;
    double tolerance = 0.0;
    bool passed = false;
};

inline constexpr std::size_t kGradientSubset = 256;

/**
 * Central differences of `value` around `x` against `analytic`, over every
 * coordinate or a seeded subset of `subset` coordinates when x is larger.
 * Relative error is |a - n| / max(|a|, |n|, 1e-4).
 */
GradientReport compare_gradient(const std::function<double(std::span<const double>)>& value, std::span<const double> x,
                                std::span<const double> analytic, double step, double tolerance,
                                std::size_t subset = kGradientSubset, std::uint64_t seed = 0);

/// Tabular models check every parameter; linear models a random subset of 256.
GradientReport gradient_check(LossId id, const LogitsModel& model, const LogitsModel& ref, const LossBatch& batch,
                              double step = 1e-5, double tolerance = 1e-4, std::uint64_t seed = 0);

} // namespace shiq
