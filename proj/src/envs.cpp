#include "o2o/envs.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace o2o::envs {

namespace {

constexpr double kPi = std::numbers::pi;

double wrap_angle(double theta) { return std::remainder(theta, 2.0 * kPi); }

std::pair<Vector, bool> clip_action(const Vector& action, int dim) {
    if (action.size() != dim) throw DimensionError("action has " + std::to_string(action.size()) + " entries, expected " + std::to_string(dim));
    const Vector clipped = action.cwiseMax(-1.0).cwiseMin(1.0);
    return {clipped, !(clipped.array() == action.array()).all()};
}

}  // namespace

// ---------------------------------------------------------------------------
// Pendulum

Vector Pendulum::from_angle(double theta, double theta_dot) {
    Vector s(3);
    s << std::cos(theta), std::sin(theta), theta_dot;
    return s;
}

double Pendulum::angle(const Vector& state) { return std::atan2(state[1], state[0]); }

double Pendulum::reward(double theta, double theta_dot, double torque) {
    const double th = wrap_angle(theta);
    return -(th * th + 0.1 * theta_dot * theta_dot + 0.001 * torque * torque);
}

Vector Pendulum::reset(Rng& rng) const {
    const double theta = uniform(rng, -kPi, kPi);
    const double theta_dot = uniform(rng, -1.0, 1.0);
    return from_angle(theta, theta_dot);
}

StepResult Pendulum::step(const Vector& state, const Vector& action) const {
    if (state.size() != 3) throw DimensionError("pendulum state must have 3 entries");
    const auto [a, clamped] = clip_action(action, 1);
    const double theta = angle(state);
    const double theta_dot = state[2];
    const double u = kMaxTorque * a[0];
    const double accel = 3.0 * kGravity / (2.0 * kLength) * std::sin(theta) + 3.0 / (kMass * kLength * kLength) * u;
    const double new_dot = std::clamp(theta_dot + accel * kDt, -kMaxSpeed, kMaxSpeed);
    const double new_theta = theta + new_dot * kDt;
    return {from_angle(new_theta, new_dot), reward(theta, theta_dot, u), false, clamped};
}

// ---------------------------------------------------------------------------
// PointNav

bool PointNav::at_goal(const Vector& s) { return std::hypot(s[0] - kGoalX, s[1] - kGoalY) < kGoalRadius; }

bool PointNav::in_start_region(const Vector& s) {
    return s[0] >= kStartLo && s[0] <= kStartHi && s[1] >= kStartLo && s[1] <= kStartHi;
}

Vector PointNav::reset(Rng& rng) const {
    Vector s = Vector::Zero(4);
    s[0] = uniform(rng, kStartLo, kStartHi);
    s[1] = uniform(rng, kStartLo, kStartHi);
    return s;
}

StepResult PointNav::step(const Vector& state, const Vector& action) const {
    if (state.size() != 4) throw DimensionError("pointnav state must have 4 entries");
    const auto [a, clamped] = clip_action(action, 2);
    Vector next(4);
    for (int k = 0; k < 2; ++k) {
        double v = std::clamp(state[2 + k] + kAccel * a[k] * kDt, -kMaxSpeed, kMaxSpeed);
        double p = state[k] + v * kDt;
        if (p < kArenaLo || p > kArenaHi) {
            p = std::clamp(p, kArenaLo, kArenaHi);
            v = 0.0;
        }
        next[k] = p;
        next[2 + k] = v;
    }
    const bool goal = at_goal(next);
    return {next, goal ? 1.0 : 0.0, goal, clamped};
}

std::unique_ptr<ContinuousEnv> make_env(const std::string& id) {
    if (id == "pendulum") return std::make_unique<Pendulum>();
    if (id == "pointnav") return std::make_unique<PointNav>();
    throw ConfigError("unknown continuous environment id '" + id + "'");
}

EvalResult evaluate_policy(const ContinuousEnv& env, const Policy& policy, int episodes, std::uint64_t seed) {
    if (episodes < 1) throw ConfigError("evaluate_policy needs at least one episode");
    EvalResult res;
    for (int ep = 0; ep < episodes; ++ep) {
        Rng rng = fork_rng(seed, static_cast<std::uint64_t>(ep));
        Vector s = env.reset(rng);
        double ret = 0.0;
        for (int t = 0; t < env.horizon(); ++t) {
            const StepResult r = env.step(s, policy(s));
            ret += r.reward;
            s = r.next_state;
            if (r.terminal) break;
        }
        res.returns.push_back(ret);
    }
    const double n = static_cast<double>(episodes);
    res.mean = std::accumulate(res.returns.begin(), res.returns.end(), 0.0) / n;
    double var = 0.0;
    for (double r : res.returns) var += (r - res.mean) * (r - res.mean);
    res.std = std::sqrt(var / n);
    return res;
}

namespace {

// Reference returns measured with evaluate_policy over 100 episodes (seed 12345):
// uniform-random actions and the scripted expert controller.
constexpr double kPendulumRandomReturn = -1299.6;
constexpr double kPendulumExpertReturn = -175.7;

Vector pendulum_controller(const Vector& s, double swing_torque, double kp, double kd) {
    const double theta = Pendulum::angle(s);
    const double omega = s[2];
    constexpr double w0sq = 3.0 * Pendulum::kGravity / (2.0 * Pendulum::kLength);
    double u = 0.0;
    if (std::abs(theta) < 0.6) {
        u = -(kp * theta + kd * omega);
    } else {
        const double energy = 0.5 * omega * omega + w0sq * std::cos(theta);
        const double deficit = w0sq - energy;
        if (std::abs(omega) < 0.1)
            u = swing_torque;
        else
            u = swing_torque * std::clamp(deficit * omega, -1.0, 1.0);
    }
    Vector a(1);
    a[0] = std::clamp(u / Pendulum::kMaxTorque, -1.0, 1.0);
    return a;
}

}  // namespace

double normalized_score(const std::string& env_id, double raw_return) {
    if (env_id == "pendulum")
        return 100.0 * (raw_return - kPendulumRandomReturn) / (kPendulumExpertReturn - kPendulumRandomReturn);
    if (env_id == "pointnav") return 100.0 * raw_return;
    throw ConfigError("no normalization reference for '" + env_id + "'");
}

Policy scripted_policy(const std::string& env_id, const std::string& quality, std::uint64_t seed) {
    if (quality == "random") {
        const int dim = make_env(env_id)->action_dim();
        auto rng = std::make_shared<Rng>(seed);
        return [rng, dim](const Vector&) {
            Vector a(dim);
            for (int k = 0; k < dim; ++k) a[k] = uniform(*rng, -1.0, 1.0);
            return a;
        };
    }
    if (env_id == "pendulum") {
        if (quality == "expert") return [](const Vector& s) { return pendulum_controller(s, 2.0, 10.0, 2.0); };
        if (quality == "medium") return [](const Vector& s) { return pendulum_controller(s, 0.8, 6.0, 0.5); };
    }
    if (env_id == "pointnav") {
        // The medium controller settles just outside the goal disc; only noisy
        // executions of it reach the goal.
        const double miss = quality == "expert" ? 0.0 : 0.5;
        if (quality == "expert" || quality == "medium") {
            return [miss](const Vector& s) {
                Vector a(2);
                a[0] = std::clamp(1.5 * (PointNav::kGoalX - s[0]) - 2.0 * s[2], -1.0, 1.0);
                a[1] = std::clamp(1.5 * (PointNav::kGoalY - miss - s[1]) - 2.0 * s[3], -1.0, 1.0);
                return a;
            };
        }
    }
    throw ConfigError("no scripted '" + quality + "' policy for '" + env_id + "'");
}

// ---------------------------------------------------------------------------
// Tabular

void TabularMdp::validate() const {
    if (n_states < 1 || n_actions < 1 || n_states > 64 || n_actions > 64)
        throw ConfigError("tabular MDP sizes must lie in [1, 64]");
    if (transition.size() != static_cast<std::size_t>(n_states) * n_actions * n_states)
        throw ConfigError("transition tensor has the wrong size");
    if (reward.rows() != n_states || reward.cols() != n_actions) throw ConfigError("reward table has the wrong shape");
    if (reward.minCoeff() < -1.0 || reward.maxCoeff() > 1.0) throw ConfigError("rewards must lie in [-1, 1]");
    for (int s = 0; s < n_states; ++s)
        for (int a = 0; a < n_actions; ++a) {
            double row = 0.0;
            for (int s2 = 0; s2 < n_states; ++s2) {
                if (p(s, a, s2) < 0.0) throw ConfigError("negative transition probability");
                row += p(s, a, s2);
            }
            if (std::abs(row - 1.0) > 1e-9) throw ConfigError("transition row is not stochastic");
        }
}

int TabularMdp::step(int s, int a, Rng& rng) const {
    double u = uniform(rng, 0.0, 1.0);
    for (int s2 = 0; s2 < n_states; ++s2) {
        u -= p(s, a, s2);
        if (u < 0.0) return s2;
    }
    return n_states - 1;
}

TabularMdp make_chain(int n, double gamma, double slip) {
    if (n < 2) throw ConfigError("a chain needs at least 2 states");
    TabularMdp m;
    m.n_states = n;
    m.n_actions = 2;
    m.gamma = gamma;
    m.transition.assign(static_cast<std::size_t>(n) * 2 * n, 0.0);
    m.reward = Matrix::Zero(n, 2);
    for (int s = 0; s < n; ++s) {
        const int left = std::max(s - 1, 0);
        const int right = std::min(s + 1, n - 1);
        m.p(s, 0, left) += 1.0 - slip;
        m.p(s, 0, right) += slip;
        m.p(s, 1, right) += 1.0 - slip;
        m.p(s, 1, left) += slip;
    }
    m.reward(n - 1, 1) = 1.0;
    m.reward(0, 0) = 0.1;
    m.validate();
    return m;
}

TabularMdp make_chain_from_id(const std::string& id, double gamma) {
    if (id.rfind("chain-", 0) != 0) throw ConfigError("not a chain id: '" + id + "'");
    try {
        return make_chain(std::stoi(id.substr(6)), gamma);
    } catch (const std::logic_error&) {
        throw ConfigError("bad chain length in '" + id + "'");
    }
}

namespace {

void check_policy(const TabularMdp& mdp, const Matrix& policy) {
    if (policy.rows() != mdp.n_states || policy.cols() != mdp.n_actions) throw DimensionError("policy table has the wrong shape");
    for (int s = 0; s < mdp.n_states; ++s)
        if (std::abs(policy.row(s).sum() - 1.0) > 1e-9 || policy.row(s).minCoeff() < 0.0)
            throw ConfigError("policy row " + std::to_string(s) + " is not a distribution");
}

Matrix solve_q(const TabularMdp& mdp, const Matrix& policy, const Matrix& reward) {
    if (!(mdp.gamma >= 0.0 && mdp.gamma < 1.0)) throw ConfigError("exact evaluation needs 0 <= gamma < 1");
    check_policy(mdp, policy);
    const int S = mdp.n_states, A = mdp.n_actions, n = S * A;
    Matrix m = Matrix::Identity(n, n);
    Vector r(n);
    for (int s = 0; s < S; ++s)
        for (int a = 0; a < A; ++a) {
            const int row = s * A + a;
            r[row] = reward(s, a);
            for (int s2 = 0; s2 < S; ++s2) {
                const double p = mdp.p(s, a, s2);
                if (p == 0.0) continue;
                for (int a2 = 0; a2 < A; ++a2) m(row, s2 * A + a2) -= mdp.gamma * p * policy(s2, a2);
            }
        }
    const Vector q = m.partialPivLu().solve(r);
    Matrix out(S, A);
    for (int s = 0; s < S; ++s)
        for (int a = 0; a < A; ++a) out(s, a) = q[s * A + a];
    return out;
}

}  // namespace

Matrix exact_policy_eval(const TabularMdp& mdp, const Matrix& policy) { return solve_q(mdp, policy, mdp.reward); }

Matrix exact_soft_policy_eval(const TabularMdp& mdp, const Matrix& policy, double alpha) {
    check_policy(mdp, policy);
    // Fold the successor entropy bonus into the reward: R'(s,a) = R + gamma sum_s' P alpha H(pi(.|s')).
    Vector entropy(mdp.n_states);
    for (int s = 0; s < mdp.n_states; ++s) {
        double h = 0.0;
        for (int a = 0; a < mdp.n_actions; ++a)
            if (policy(s, a) > 0.0) h -= policy(s, a) * std::log(policy(s, a));
        entropy[s] = h;
    }
    Matrix reward = mdp.reward;
    for (int s = 0; s < mdp.n_states; ++s)
        for (int a = 0; a < mdp.n_actions; ++a)
            for (int s2 = 0; s2 < mdp.n_states; ++s2) reward(s, a) += mdp.gamma * mdp.p(s, a, s2) * alpha * entropy[s2];
    return solve_q(mdp, policy, reward);
}

double bellman_residual(const TabularMdp& mdp, const Matrix& policy, const Matrix& q) {
    double worst = 0.0;
    for (int s = 0; s < mdp.n_states; ++s)
        for (int a = 0; a < mdp.n_actions; ++a) {
            double backup = mdp.reward(s, a);
            for (int s2 = 0; s2 < mdp.n_states; ++s2)
                backup += mdp.gamma * mdp.p(s, a, s2) * policy.row(s2).dot(q.row(s2));
            worst = std::max(worst, std::abs(q(s, a) - backup));
        }
    return worst;
}

ValueIterationResult value_iteration(const TabularMdp& mdp, double tol) {
    const int S = mdp.n_states, A = mdp.n_actions;
    Matrix q = Matrix::Zero(S, A);
    for (int it = 0; it < 1000000; ++it) {
        const Vector v = q.rowwise().maxCoeff();
        Matrix next = mdp.reward;
        for (int s = 0; s < S; ++s)
            for (int a = 0; a < A; ++a)
                for (int s2 = 0; s2 < S; ++s2) next(s, a) += mdp.gamma * mdp.p(s, a, s2) * v[s2];
        const double delta = (next - q).cwiseAbs().maxCoeff();
        q = std::move(next);
        if (delta < tol) break;
    }
    ValueIterationResult res{q, std::vector<int>(S)};
    for (int s = 0; s < S; ++s) q.row(s).maxCoeff(&res.greedy[s]);
    return res;
}

double tabular_return(const TabularMdp& mdp, const Matrix& policy) {
    const Matrix q = exact_policy_eval(mdp, policy);
    return policy.row(mdp.reset()).dot(q.row(mdp.reset()));
}

}  // namespace o2o::envs
