#pragma once

#include "shiq/data.hpp"
#include "shiq/losses.hpp"
#include "shiq/oracle.hpp"
#include "shiq/parallel.hpp"
#include "shiq/policy.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace shiq {

enum class Optimizer { adam, sgd };
Optimizer parse_optimizer(std::string_view name);

struct AdamParams {
    double b1 = 0.9;
    double b2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    std::uint64_t t = 0;
};

/// Bias-corrected Adam: p -= lr * m_hat / (sqrt(v_hat) + eps).
void adam_step(std::span<double> params, std::span<const double> grad, AdamState& state, double lr,
               const AdamParams& hp = {});
void sgd_step(std::span<double> params, std::span<const double> grad, double lr);

enum class Init { reference, random };

struct TrainConfig {
    LossId loss = LossId::shiq;
    double beta = 0.5;
    double learning_rate = 1e-3;
    std::size_t batch_size = 256;
    int epochs = 100;
    Optimizer optimizer = Optimizer::adam;
    AdamParams adam;
    std::size_t eval_every = 50;
    std::uint64_t seed = 0;
    Normalization normalization = Normalization::token_count;
    Init init = Init::reference;
    double init_scale = 0.1; ///< half-width of the uniform noise added by Init::random
    Execution execution = Execution::parallel;
};

/// Records (trajectory losses), pairs (dpo, copg) or groups (dro_v) the loss iterates over.
std::size_t unit_count(LossId loss, const OfflineDataset& ds);

/// Throws ValidationError when the dataset cannot feed the loss or the config is out of range.
void validate(const TrainConfig& config, const OfflineDataset& ds, double oracle_beta);

struct EvalRecord {
    std::size_t step = 0;
    double loss = 0.0;      ///< over the whole dataset
    double regret = 0.0;
    double kl = 0.0;        ///< expected discounted KL to the reference
    double grad_norm = 0.0; ///< of the whole-dataset loss
    double reward = 0.0;    ///< expected discounted reward
    double success = 0.0;   ///< probability of reaching a goal transition

    bool operator==(const EvalRecord&) const = default;
};

struct RunTrace {
    std::string method;
    std::size_t steps = 0;
    std::vector<EvalRecord> records;
    std::vector<double> final_parameters;

    bool operator==(const RunTrace&) const = default;
};

/// Evaluation of `model` against the oracle and the full dataset.
EvalRecord evaluate_checkpoint(LossId loss, const LogitsModel& model, const LogitTable& ref, const LossBatch& full,
                               const OracleSolution& oracle, const PolicyTable& ref_policy, Execution exec);

/**
 * Runs epochs * ceil(units / batch_size) optimizer steps from a copy of `ref`
 * (or a seeded perturbation of it). Each epoch reshuffles the units with a
 * generator seeded from (seed, epoch). Evaluates at step 0, every eval_every
 * steps and at the final step.
 */
RunTrace train(const TrainConfig& config, const LogitsModel& ref, const OfflineDataset& ds,
               const OracleSolution& oracle);

/// Copy of `like` holding `params`.
LogitsModel with_parameters(const LogitsModel& like, std::span<const double> params);

inline constexpr std::string_view kMetricsHeader = "step,loss,regret,kl,grad_norm";
inline constexpr std::string_view kCurveHeader = "step,reward,kl,success";

void write_metrics_csv(const RunTrace& trace, const std::string& path);
/// Per-checkpoint expected reward, KL and success probability.
void write_curve_csv(const RunTrace& trace, const std::string& path);

} // namespace shiq
