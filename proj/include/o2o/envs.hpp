#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "o2o/common.hpp"

namespace o2o::envs {

struct StepResult {
    Vector next_state;
    double reward = 0.0;
    bool terminal = false;  // goal reached; horizon truncation is not terminal
    bool clamped = false;   // the action was outside [-1, 1] and got clipped
};

class ContinuousEnv {
public:
    virtual ~ContinuousEnv() = default;
    virtual std::string id() const = 0;
    virtual int state_dim() const = 0;
    virtual int action_dim() const = 0;
    virtual int horizon() const = 0;
    virtual Vector reset(Rng& rng) const = 0;
    virtual StepResult step(const Vector& state, const Vector& action) const = 0;
    virtual std::unique_ptr<ContinuousEnv> clone() const = 0;

    double gamma = 0.99;
};

/**
 * Torque-limited inverted pendulum (swing-up).
 *
 * State (cos theta, sin theta, theta_dot) with theta in rad (0 = upright) and
 * theta_dot in rad/s. Action a in [-1, 1] maps to torque u = 2a (N m).
 * theta_ddot = (3g / 2l) sin theta + (3 / m l^2) u with g = 10, m = 1, l = 1,
 * integrated with semi-implicit Euler at dt = 0.05 and |theta_dot| <= 8.
 */
class Pendulum final : public ContinuousEnv {
public:
    static constexpr double kGravity = 10.0;
    static constexpr double kMass = 1.0;
    static constexpr double kLength = 1.0;
    static constexpr double kDt = 0.05;
    static constexpr double kMaxSpeed = 8.0;
    static constexpr double kMaxTorque = 2.0;

    std::string id() const override { return "pendulum"; }
    int state_dim() const override { return 3; }
    int action_dim() const override { return 1; }
    int horizon() const override { return horizon_; }
    Vector reset(Rng& rng) const override;
    StepResult step(const Vector& state, const Vector& action) const override;
    std::unique_ptr<ContinuousEnv> clone() const override { return std::make_unique<Pendulum>(*this); }

    static Vector from_angle(double theta, double theta_dot);
    static double angle(const Vector& state);  // wrapped to [-pi, pi]
    static double reward(double theta, double theta_dot, double torque);

    int horizon_ = 200;
};

/**
 * Sparse-reward 2-D point mass. State (x, y, vx, vy) in m and m/s. The action
 * is an acceleration in [-1, 1]^2 (m/s^2 scaled by kAccel); the arena is a
 * walled box. Reward 1 and termination when the next position is within
 * kGoalRadius of the goal, else 0.
 */
class PointNav final : public ContinuousEnv {
public:
    static constexpr double kDt = 0.1;
    static constexpr double kAccel = 2.0;
    static constexpr double kMaxSpeed = 1.0;
    static constexpr double kArenaLo = -0.5;
    static constexpr double kArenaHi = 4.0;
    static constexpr double kGoalX = 3.0;
    static constexpr double kGoalY = 3.0;
    static constexpr double kGoalRadius = 0.5;
    static constexpr double kStartLo = 0.0;
    static constexpr double kStartHi = 0.5;

    std::string id() const override { return "pointnav"; }
    int state_dim() const override { return 4; }
    int action_dim() const override { return 2; }
    int horizon() const override { return horizon_; }
    Vector reset(Rng& rng) const override;
    StepResult step(const Vector& state, const Vector& action) const override;
    std::unique_ptr<ContinuousEnv> clone() const override { return std::make_unique<PointNav>(*this); }

    static bool at_goal(const Vector& state);
    static bool in_start_region(const Vector& state);

    int horizon_ = 100;
};

/// "pendulum" or "pointnav". Tabular ids ("chain-N") go through make_chain().
std::unique_ptr<ContinuousEnv> make_env(const std::string& id);

using Policy = std::function<Vector(const Vector&)>;

struct EvalResult {
    double mean = 0.0;
    double std = 0.0;
    std::vector<double> returns;
};

/// Undiscounted returns of `episodes` rollouts. Episode i starts from a reset
/// seeded by (seed, i), so repeated calls see the same initial states.
EvalResult evaluate_policy(const ContinuousEnv& env, const Policy& policy, int episodes, std::uint64_t seed);

/// 0 = uniform-random behavior, 100 = scripted expert (pendulum); success percentage (pointnav).
double normalized_score(const std::string& env_id, double raw_return);

/// Hand-written controllers. quality is "expert", "medium" or "random"; the random
/// controller draws uniform actions from its own stream seeded by `seed`.
Policy scripted_policy(const std::string& env_id, const std::string& quality, std::uint64_t seed = 0);

// ---------------------------------------------------------------------------
// Tabular oracle

struct TabularMdp {
    int n_states = 0;
    int n_actions = 0;
    std::vector<double> transition;  // [s][a][s'] flattened
    Matrix reward;                   // n_states x n_actions
    double gamma = 0.99;

    double p(int s, int a, int s2) const { return transition[(static_cast<std::size_t>(s) * n_actions + a) * n_states + s2]; }
    double& p(int s, int a, int s2) { return transition[(static_cast<std::size_t>(s) * n_actions + a) * n_states + s2]; }

    /// Throws ConfigError unless rows are stochastic (1e-9), rewards lie in [-1, 1] and sizes are <= 64.
    void validate() const;
    int reset() const { return 0; }
    int step(int s, int a, Rng& rng) const;
};

/**
 * Chain of n states; action 0 moves left, action 1 moves right, and with
 * probability `slip` the move goes the other way. Pushing right at the right
 * end pays 1; pushing left at the left end pays 0.1.
 */
TabularMdp make_chain(int n, double gamma, double slip = 0.0);

/// Parses "chain-N".
TabularMdp make_chain_from_id(const std::string& id, double gamma);

/// Q solving Q = R + gamma P Pi Q by a direct linear solve. `policy` is
/// n_states x n_actions with rows summing to 1.
Matrix exact_policy_eval(const TabularMdp& mdp, const Matrix& policy);

/// Soft evaluation: the successor value includes -alpha log pi(a'|s').
Matrix exact_soft_policy_eval(const TabularMdp& mdp, const Matrix& policy, double alpha);

/// max over (s,a) of |Q - (R + gamma P Pi Q)|.
double bellman_residual(const TabularMdp& mdp, const Matrix& policy, const Matrix& q);

struct ValueIterationResult {
    Matrix q;
    std::vector<int> greedy;
};

ValueIterationResult value_iteration(const TabularMdp& mdp, double tol = 1e-12);

/// Expected discounted return from the start state.
double tabular_return(const TabularMdp& mdp, const Matrix& policy);

}  // namespace o2o::envs
