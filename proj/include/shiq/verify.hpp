#pragma once

#include "shiq/losses.hpp"
#include "shiq/mdp.hpp"
#include "shiq/oracle.hpp"
#include "shiq/policy.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace shiq {

/// One line of the suite report. Upper-bound checks pass when value <= tolerance,
/// lower-bound checks when value >= tolerance.
struct Check {
    std::string id;
    double value = 0.0;
    double tolerance = 0.0;
    bool lower_bound = false;
    bool passed() const;
};

struct Fixture {
    std::string name;
    MdpPtr mdp;
    LogitsModel ref;
    double beta = 1.0;
};

/// Bandit (2.5, 2, 1) at beta 0.5, both grid settings at beta 0.1 and a discounted
/// three-token chain with eos, dense rewards and a random reference.
std::vector<Fixture> standard_fixtures();

/// Undiscounted bandit and two-/three-token chains with random references, beta 0.5.
std::vector<Fixture> value_link_fixtures();
/// Uniform-reference bandit and chain with r = 0.
std::vector<Fixture> zero_reward_fixtures();

/// Deliberate faults for exercising the failure path of the suite.
enum class Fault { none, oracle, gradient };
Fault parse_fault(std::string_view name);

struct VerifyOptions {
    Fault fault = Fault::none;
    std::size_t trajectory_cap = 10'000;
    std::uint64_t seed = 0;
};

/// Bellman residual of q*, TV gap of the closed-form policy and J(pi*) against E V*.
std::vector<Check> check_thm1(const Fixture& f, const VerifyOptions& opt = {});
/// Same for g = (q* + beta ln pi_ref) / beta.
std::vector<Check> check_thm2(const Fixture& f, const VerifyOptions& opt = {});
/// Same for l = g + v_ref, plus invariance of softmax(g + phi) under 10 random potentials.
std::vector<Check> check_thm3(const Fixture& f, const VerifyOptions& opt = {});
/// Multi-step identity at the logit fixed point, over every start index of every enumerated
/// (or, above the cap, sampled) trajectory.
std::vector<Check> check_thm4(const Fixture& f, const VerifyOptions& opt = {});

/// Value link |sequence_value(x) - beta (v_l*(x) - v_ref(x))| over every prompt.
Check check_value_link(const Fixture& f, const VerifyOptions& opt = {});
/// Trains shiq_tk to convergence on the full enumerated dataset; value is max_s TV(pi, pi*).
Check check_thm5(const Fixture& f, const VerifyOptions& opt = {});

struct InitContrast {
    double try2 = 0.0;
    double shiq_init = 0.0;
    double shiq_ms = 0.0;
    double shiq = 0.0;
};

/// Gradient norms at l_ref on a zero-reward fixture, full batch.
InitContrast init_contrast(const MdpPtr& mdp, const LogitsModel& ref, double beta);
std::vector<Check> check_init_contrast(const Fixture& f, const VerifyOptions& opt = {});

struct Propagation {
    int length = 0;
    std::vector<int> first_step_depths_ms;   ///< depths whose logits get nonzero step-1 gradient
    std::vector<int> first_step_depths_shiq;
    int steps_depth1_ms = -1;   ///< full-batch steps until depth-1 logits moved >= threshold
    int steps_depth1_shiq = -1;
    int steps_all_ms = -1;      ///< until every depth moved >= threshold
    int steps_all_shiq = -1;
};

/// Terminal-reward chain of `length` tokens, gradient descent from the uniform reference.
Propagation propagation(int length, double beta = 1.0, double learning_rate = 1.0, int max_steps = 200,
                        double threshold = 1e-6);
std::vector<Check> check_propagation(int length, const VerifyOptions& opt = {});

/// Every loss evaluated at 1e-2 noise around its fixed point stays above 1e-6.
std::vector<Check> check_uniqueness(const Fixture& f, const VerifyOptions& opt = {});

/// Central-difference check of every loss at a random tabular model.
std::vector<Check> check_gradients(const Fixture& f, const VerifyOptions& opt = {});

/// Runs the whole suite; `progress` receives each check as it completes.
std::vector<Check> run_suite(const VerifyOptions& opt = {}, const std::function<void(const Check&)>& progress = {});

inline constexpr std::string_view kReportHeader = "id,max_residual,tolerance,status";
/// `id,max_residual,tolerance,status` with status pass|fail; lower-bound tolerances print as ">=x".
void write_report(const std::vector<Check>& checks, std::ostream& out);
std::string report_line(const Check& c);

} // namespace shiq
